#include "natimm/objectives.hpp"

#include <cmath>

namespace natimm {

WeightingScheme parse_weighting(const std::string& name) {
    if (name == "token") return WeightingScheme::token_averaging;
    if (name == "square") return WeightingScheme::square_averaging;
    if (name == "sample") return WeightingScheme::sample_averaging;
    throw ConfigError("unknown weighting scheme \"" + name + "\" (expected token|square|sample)");
}

std::string weighting_str(WeightingScheme scheme) {
    switch (scheme) {
        case WeightingScheme::token_averaging: return "token";
        case WeightingScheme::square_averaging: return "square";
        case WeightingScheme::sample_averaging: return "sample";
    }
    return "?";
}

double token_weight(WeightingScheme scheme, int64_t loss_tokens) {
    if (loss_tokens < 1) throw ContractError("token_weight: sample has no loss-bearing tokens");
    switch (scheme) {
        case WeightingScheme::token_averaging: return 1.0;
        case WeightingScheme::square_averaging: return 1.0 / std::sqrt(static_cast<double>(loss_tokens));
        case WeightingScheme::sample_averaging: return 1.0 / static_cast<double>(loss_tokens);
    }
    return 0.0;
}

// ---- pretrain loss -------------------------------------------------------------

namespace {

// CE rows: position i-1 predicts token i whenever loss_mask[i] is set. Rows
// outside any prediction get weight 0 (and therefore an exactly zero gradient).
struct CeRows {
    std::vector<int> targets;
    std::vector<float> weights;
    double weight_total = 0.0;
    int64_t loss_tokens = 0;
};

CeRows ce_rows(const PackedBatch& batch, WeightingScheme scheme) {
    const int64_t n = batch.length();
    CeRows rows;
    rows.targets.assign(static_cast<size_t>(n), 0);
    rows.weights.assign(static_cast<size_t>(n), 0.0f);
    for (int64_t si = 0; si < batch.num_samples(); ++si) {
        const int64_t b = batch.sample_begin[static_cast<size_t>(si)];
        const int64_t e = batch.sample_begin[static_cast<size_t>(si) + 1];
        const int64_t l = batch.sample_loss_tokens[static_cast<size_t>(si)];
        if (l == 0) continue;  // contributes no terms
        const double w = token_weight(scheme, l);
        for (int64_t i = b; i < e; ++i) {
            if (!batch.loss_mask[static_cast<size_t>(i)]) continue;
            if (i == b)
                throw DataError("loss mask set on the first token of a sample (nothing conditions it)");
            rows.targets[static_cast<size_t>(i - 1)] = batch.tokens[static_cast<size_t>(i)];
            rows.weights[static_cast<size_t>(i - 1)] = static_cast<float>(w);
            rows.weight_total += w;
            rows.loss_tokens += 1;
        }
    }
    return rows;
}

}  // namespace

double batch_weight_total(const PackedBatch& batch, WeightingScheme scheme) {
    return ce_rows(batch, scheme).weight_total;
}

Tensor pretrain_loss_on_logits(Tape* tape, const Tensor& logits, const PackedBatch& batch, WeightingScheme scheme,
                               PretrainLossInfo* info) {
    CeRows rows = ce_rows(batch, scheme);
    if (rows.loss_tokens == 0)
        throw DegenerateBatchError("batch carries no loss-bearing tokens; skipping");
    Tensor raw = softmax_cross_entropy(tape, logits, rows.targets, rows.weights);
    Tensor loss = scale(tape, raw, 1.0 / rows.weight_total);
    if (info) {
        info->weighted_sum = raw.item();
        info->weight_total = rows.weight_total;
        info->loss_tokens = rows.loss_tokens;
        info->correct = 0;
        const int64_t v = logits.dim(1);
        auto pl = logits.data();
        for (int64_t i = 0; i < logits.dim(0); ++i) {
            if (rows.weights[static_cast<size_t>(i)] == 0.0f) continue;
            const float* row = pl.data() + static_cast<size_t>(i * v);
            int arg = 0;
            for (int64_t j = 1; j < v; ++j)
                if (row[j] > row[arg]) arg = static_cast<int>(j);
            if (arg == rows.targets[static_cast<size_t>(i)]) info->correct += 1;
        }
    }
    return loss;
}

Tensor pretrain_loss(Tape* tape, const Model& model, const PackedBatch& batch, const PositionMap& positions,
                     WeightingScheme scheme, PretrainLossInfo* info) {
    Tensor logits = model_forward(tape, model, batch, positions);
    return pretrain_loss_on_logits(tape, logits, batch, scheme, info);
}

// ---- sequence log-probability -----------------------------------------------------

Tensor sequence_logprob(Tape* tape, const Model& model, const Sample& query, const std::vector<int>& response,
                        const std::vector<double>& delta_per_image) {
    if (response.empty()) {
        // Degenerate by the sum convention: log prob of an empty response is 0.
        return Tensor::zeros({1});
    }
    Sample full = query;
    for (int id : response) {
        full.tokens.push_back(id);
        full.modality.push_back(Modality::text);
        full.loss_mask.push_back(1);
    }
    PackedBatch batch = pack_single(full);
    PositionMap pm = batch_positions(batch, delta_per_image);
    Tensor logits = model_forward(tape, model, batch, pm);
    // weight 1 on every response token; nll = -sum log p  =>  logprob = -nll
    const int64_t n = batch.length();
    std::vector<int> targets(static_cast<size_t>(n), 0);
    std::vector<float> weights(static_cast<size_t>(n), 0.0f);
    const int64_t resp_begin = n - static_cast<int64_t>(response.size());
    if (resp_begin < 1) throw ContractError("sequence_logprob: query must contain at least one token");
    for (int64_t i = resp_begin; i < n; ++i) {
        targets[static_cast<size_t>(i - 1)] = full.tokens[static_cast<size_t>(i)];
        weights[static_cast<size_t>(i - 1)] = 1.0f;
    }
    Tensor nll = softmax_cross_entropy(tape, logits, targets, weights);
    return scale(tape, nll, -1.0);
}

// ---- scalar preference losses ---------------------------------------------------------

namespace {
double softplus_d(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

void check_finite(double x, const char* what) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite ") + what + " in preference loss");
}
}  // namespace

double dpo_loss_value(double policy_chosen, double policy_rejected, double ref_chosen, double ref_rejected,
                      double beta) {
    check_finite(policy_chosen, "policy log-prob (chosen)");
    check_finite(policy_rejected, "policy log-prob (rejected)");
    check_finite(ref_chosen, "reference log-prob (chosen)");
    check_finite(ref_rejected, "reference log-prob (rejected)");
    const double margin = beta * ((policy_chosen - ref_chosen) - (policy_rejected - ref_rejected));
    return softplus_d(-margin);  // -log sigmoid(margin)
}

BcoTerms bco_loss_value(double policy_chosen, double policy_rejected, double ref_chosen, double ref_rejected,
                        double beta, double shift) {
    check_finite(policy_chosen, "policy log-prob (chosen)");
    check_finite(policy_rejected, "policy log-prob (rejected)");
    check_finite(ref_chosen, "reference log-prob (chosen)");
    check_finite(ref_rejected, "reference log-prob (rejected)");
    check_finite(shift, "reward shift");
    BcoTerms t;
    const double z_c = beta * (policy_chosen - ref_chosen) - shift;
    const double z_r = beta * (policy_rejected - ref_rejected) - shift;
    t.chosen = softplus_d(-z_c);
    t.rejected = softplus_d(z_r);
    return t;
}

double RewardShift::update(double step_mean_reward) {
    if (!std::isfinite(step_mean_reward)) throw NumericError("non-finite reward in shift update");
    value = decay * value + (1.0 - decay) * step_mean_reward;
    return value;
}

// ---- MPO ---------------------------------------------------------------------------------

void MPOConfig::validate() const {
    if (w_p < 0 || w_q < 0 || w_g < 0) throw ConfigError("MPO term weights must be non-negative");
    if (!(beta > 0)) throw ConfigError("MPO beta must be positive");
    if (!(shift_decay >= 0 && shift_decay < 1)) throw ConfigError("MPO shift decay must lie in [0,1)");
}

Tensor mpo_loss(Tape* tape, const MPOConfig& cfg, const PreferencePair& pair, const Model& policy,
                const Model& reference, const std::vector<double>& delta_per_image, double shift,
                MpoTerms* terms) {
    cfg.validate();
    if (!std::isfinite(shift)) throw NumericError("non-finite reward shift");
    // Reference log-probs are constants of the step (frozen model, no tape).
    const double ref_c = sequence_logprob(nullptr, reference, pair.query, pair.chosen, delta_per_image).item();
    const double ref_r = sequence_logprob(nullptr, reference, pair.query, pair.rejected, delta_per_image).item();
    Tensor lp_c = sequence_logprob(tape, policy, pair.query, pair.chosen, delta_per_image);
    Tensor lp_r = sequence_logprob(tape, policy, pair.query, pair.rejected, delta_per_image);
    check_finite(lp_c.item(), "policy log-prob (chosen)");
    check_finite(lp_r.item(), "policy log-prob (rejected)");
    check_finite(ref_c, "reference log-prob (chosen)");
    check_finite(ref_r, "reference log-prob (rejected)");

    // L_p = softplus(-beta * ((lp_c - ref_c) - (lp_r - ref_r)))
    Tensor margin_node = sub(tape, lp_c, lp_r);
    Tensor z_p = add_scalar(tape, scale(tape, margin_node, cfg.beta), -cfg.beta * (ref_c - ref_r));
    Tensor loss_p = softplus(tape, scale(tape, z_p, -1.0));

    // L_q+ = softplus(-(beta*(lp_c - ref_c) - shift)); L_q- = softplus(beta*(lp_r - ref_r) - shift)
    Tensor z_c = add_scalar(tape, scale(tape, lp_c, cfg.beta), -cfg.beta * ref_c - shift);
    Tensor z_r = add_scalar(tape, scale(tape, lp_r, cfg.beta), -cfg.beta * ref_r - shift);
    Tensor loss_q = add(tape, softplus(tape, scale(tape, z_c, -1.0)), softplus(tape, z_r));

    // L_g: the autoregressive loss on the chosen response (single-sample batch,
    // so every weighting scheme normalizes to the mean nll).
    Sample chosen_sample = pair.query;
    for (int id : pair.chosen) {
        chosen_sample.tokens.push_back(id);
        chosen_sample.modality.push_back(Modality::text);
        chosen_sample.loss_mask.push_back(1);
    }
    PackedBatch gb = pack_single(chosen_sample);
    PositionMap gpm = batch_positions(gb, delta_per_image);
    Tensor loss_g = pretrain_loss(tape, policy, gb, gpm, WeightingScheme::square_averaging);

    Tensor total = add(tape, add(tape, scale(tape, loss_p, cfg.w_p), scale(tape, loss_q, cfg.w_q)),
                       scale(tape, loss_g, cfg.w_g));
    if (!std::isfinite(total.item())) throw NumericError("non-finite MPO loss");
    if (terms) {
        terms->preference = loss_p.item();
        terms->quality = loss_q.item();
        terms->generation = loss_g.item();
        terms->total = total.item();
        terms->margin = lp_c.item() - lp_r.item();
        terms->chosen_reward = cfg.beta * (lp_c.item() - ref_c);
        terms->rejected_reward = cfg.beta * (lp_r.item() - ref_r);
    }
    return total;
}

}  // namespace natimm
