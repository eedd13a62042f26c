#pragma once

#include <string>
#include <vector>

#include "natimm/model.hpp"
#include "natimm/tensor.hpp"
#include "natimm/types.hpp"

namespace natimm {

// Per-token loss weight within one sample of l loss-bearing tokens:
// token averaging 1/l^0, square averaging 1/l^0.5, sample averaging 1/l^1.
enum class WeightingScheme { token_averaging, square_averaging, sample_averaging };

WeightingScheme parse_weighting(const std::string& name);
std::string weighting_str(WeightingScheme scheme);

double token_weight(WeightingScheme scheme, int64_t loss_tokens);

// Raised when a batch carries no loss-bearing token at all; the training loop
// skips the batch and logs a warning.
struct DegenerateBatchError : DataError {
    using DataError::DataError;
};

struct PretrainLossInfo {
    double weighted_sum = 0.0;   // sum over loss tokens of w_i * nll_i
    double weight_total = 0.0;   // sum of w_i (the batch normalizer)
    int64_t loss_tokens = 0;
    int64_t correct = 0;         // argmax(logits) == target over loss tokens
};

// Modality-masked autoregressive loss over a packed batch: only mask-true text
// tokens contribute, each weighted per scheme by its sample's l, and the total
// is divided by the batch's summed weight. Gradients at every other logit
// position are exactly zero.
Tensor pretrain_loss(Tape* tape, const Model& model, const PackedBatch& batch, const PositionMap& positions,
                     WeightingScheme scheme, PretrainLossInfo* info = nullptr);

// As above but on precomputed logits (used by tests and by the packed/unpacked
// equivalence check).
Tensor pretrain_loss_on_logits(Tape* tape, const Tensor& logits, const PackedBatch& batch, WeightingScheme scheme,
                               PretrainLossInfo* info = nullptr);

// Sum of per-token weights of a batch (the Eq-style normalizer), without a
// forward pass. Zero when the batch has no loss-bearing tokens.
double batch_weight_total(const PackedBatch& batch, WeightingScheme scheme);

// Sum of response-token log probabilities, conditioned causally on the query
// (and prior response tokens). Scalar graph node when tape != nullptr.
Tensor sequence_logprob(Tape* tape, const Model& model, const Sample& query, const std::vector<int>& response,
                        const std::vector<double>& delta_per_image);

// ---- closed-form preference losses (scalar versions; also used by tests) ------

// -log sigmoid(beta * ((lp_c - rl_c) - (lp_r - rl_r))), via stable softplus.
double dpo_loss_value(double policy_chosen, double policy_rejected, double ref_chosen, double ref_rejected,
                      double beta);

struct BcoTerms {
    double chosen = 0.0;    // L_q+
    double rejected = 0.0;  // L_q-
    double total() const { return chosen + rejected; }
};

// L_q+ = -log sigmoid(beta*(lp_c - rl_c) - shift); L_q- = -log sigmoid(-(beta*(lp_r - rl_r) - shift)).
// The two terms are computed independently.
BcoTerms bco_loss_value(double policy_chosen, double policy_rejected, double ref_chosen, double ref_rejected,
                        double beta, double shift);

// Exponential moving average of per-step mean rewards (decay 0.9, init 0).
struct RewardShift {
    double value = 0.0;
    double decay = 0.9;

    double update(double step_mean_reward);
    // Pools chosen and rejected rewards of the step into one mean.
    double update(double chosen_reward, double rejected_reward) {
        return update(0.5 * (chosen_reward + rejected_reward));
    }
};

// ---- MPO -----------------------------------------------------------------------

struct MPOConfig {
    double w_p = 0.8;          // preference (DPO) weight
    double w_q = 0.2;          // quality (BCO) weight
    double w_g = 1.0;          // generation weight
    double beta = 0.1;         // KL penalty coefficient
    double shift_decay = 0.9;  // reward-shift moving-average decay

    void validate() const;
};

struct MpoTerms {
    double preference = 0.0;
    double quality = 0.0;
    double generation = 0.0;
    double total = 0.0;
    double margin = 0.0;         // log pi_theta(y_c) - log pi_theta(y_r)
    double chosen_reward = 0.0;  // beta * (policy - reference) log-ratio, chosen
    double rejected_reward = 0.0;
};

// L = w_p*L_p + w_q*L_q + w_g*L_g on one preference pair, with the reference
// model held frozen (forwarded without a tape). The shift passed in is the
// moving average from previous steps; callers update it afterwards from the
// returned rewards.
Tensor mpo_loss(Tape* tape, const MPOConfig& cfg, const PreferencePair& pair, const Model& policy,
                const Model& reference, const std::vector<double>& delta_per_image, double shift,
                MpoTerms* terms = nullptr);

}  // namespace natimm
