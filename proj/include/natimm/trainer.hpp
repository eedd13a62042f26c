#pragma once

#include <optional>
#include <string>
#include <vector>

#include "natimm/checkpoint.hpp"
#include "natimm/data.hpp"
#include "natimm/model.hpp"
#include "natimm/objectives.hpp"
#include "natimm/prm.hpp"
#include "natimm/vocab.hpp"

namespace natimm {

enum class Stage { pretrain, sft, mpo, prm, bon, eval };

Stage parse_stage(const std::string& name);
std::string stage_str(Stage s);

enum class DeltaPolicy { sample, fixed, automatic, sweep };

struct RunConfig {
    Stage stage = Stage::pretrain;
    std::optional<uint64_t> seed;  // mandatory; set via config file or --seed
    int64_t steps = 0;
    int64_t batch_size = 4;
    ModelConfig model;
    MixtureConfig mixture;  // seed field unused here; streams derive from the run seed
    WeightingScheme weighting = WeightingScheme::square_averaging;
    MPOConfig mpo;
    OptimizerConfig optimizer;
    bool lr_decay = false;   // linear decay of optimizer.lr to zero over `steps`
    int64_t pack_window = 0;  // packing capacity during training; 0 = context window

    DeltaPolicy delta_policy = DeltaPolicy::sample;
    double delta_value = 1.0;  // for DeltaPolicy::fixed

    std::string data_source = "synthetic";  // synthetic | jsonl
    std::string data_path;                  // jsonl input for training stages
    std::string vocab_path;                 // empty -> builtin vocabulary
    uint64_t data_seed = 1;
    int64_t n_caption = 64;
    int64_t n_count = 64;
    int64_t n_reasoning = 64;
    int64_t n_pairs = 256;
    int64_t n_prm = 32;

    std::string ckpt_in;
    std::string ckpt_out;
    std::string metrics_out;
    bool force_stage = false;

    int64_t eval_n = 64;
    int64_t eval_pairs = 100;
    int64_t max_new = 24;

    int64_t bon_n = 8;
    int64_t bon_questions = 200;
    double bon_p_correct = 0.35;
    std::string bon_critic = "model";  // model | oracle
    std::string bon_report;

    void validate() const;
};

// Nested key = value text file; '#' starts a comment. Unknown keys are errors.
RunConfig parse_config_file(const std::string& path);
// Applies one "key = value" assignment (also used for CLI overrides).
void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value);

// ---- checkpoint glue ----------------------------------------------------------

struct TrainState {
    Stage stage = Stage::pretrain;
    int64_t step = 0;
    uint64_t seed = 0;
    double reward_shift = 0.0;
    std::string rng_state;
};

// Composes the checkpoint for (model, optional optimizer state, train state).
Checkpoint make_checkpoint(const Model& model, const OptimizerState* opt, const TrainState& state);
// Restores all three; opt may be nullptr when optimizer state is not wanted.
Model load_model(const Checkpoint& ck, OptimizerState* opt, TrainState* state);

// ---- stage entry points ----------------------------------------------------------

struct RunSummary {
    Stage stage;
    int64_t steps_run = 0;
    int64_t skipped_steps = 0;
    double final_loss = 0.0;
    std::string ckpt_out;
    std::string metrics_out;
};

RunSummary run_pretrain(const RunConfig& cfg);
RunSummary run_sft(const RunConfig& cfg);
RunSummary run_mpo(const RunConfig& cfg);
RunSummary run_prm(const RunConfig& cfg);

struct EvalRow {
    std::string delta_label;  // "1", "1/2", ..., "auto", or "baseline"
    double text_accuracy = 0.0;     // teacher-forced loss-token accuracy, language pool
    double caption_accuracy = 0.0;  // teacher-forced loss-token accuracy, caption pool
    double caption_exact_match = 0.0;
    double reasoning_answer_accuracy = 0.0;  // greedy decoding, held-out items
    double margin_mean = 0.0;                // over held-out preference pairs
};

struct EvalReport {
    std::vector<EvalRow> rows;
};

EvalReport run_eval(const RunConfig& cfg);

struct BonSummary {
    int64_t questions = 0;
    int64_t correct = 0;
    double accuracy = 0.0;
    std::string report_path;
};

BonSummary run_bon(const RunConfig& cfg);

// ---- shared helpers (also used by the acceptance suite) -----------------------------

struct StagePools {
    std::vector<Sample> language;
    std::vector<Sample> multimodal;
};

// Deterministic synthetic (or ingested) pools for a training stage.
StagePools stage_pools(const RunConfig& cfg, const Vocab& vocab);

// Held-out preference pairs derived from the run's data seed.
std::vector<PreferencePair> heldout_pairs(const RunConfig& cfg, const Vocab& vocab, int64_t n);

// Mean margin log pi(y_c) - log pi(y_r) of a model over pairs.
double mean_margin(const Model& model, const std::vector<PreferencePair>& pairs,
                   const std::vector<double>& delta_for_images);

// Greedy reasoning accuracy of a model on held-out items.
double reasoning_accuracy(const Model& model, const Vocab& vocab, const std::vector<ReasoningItem>& items,
                          int64_t max_new);

Vocab load_vocab(const RunConfig& cfg);

}  // namespace natimm
