#pragma once

#include <optional>
#include <string>
#include <vector>

#include "natimm/common.hpp"
#include "natimm/types.hpp"
#include "natimm/vocab.hpp"

namespace natimm {

// ---- wire records (one JSON object per JSONL line) ---------------------------

struct ImageRecord {
    int h = 0;
    int w = 0;
    std::vector<int> grid;
};

struct PretrainRecord {
    SampleKind kind = SampleKind::language;
    std::string text;  // prompt part, excluded from loss
    std::optional<ImageRecord> image;
    std::string target;  // loss-bearing continuation
};

struct PreferenceRecord {
    std::string query;
    std::optional<ImageRecord> image;
    std::string chosen;
    std::string rejected;
};

struct PrmRecord {
    std::string question;
    std::optional<ImageRecord> image;
    std::vector<std::string> steps;
    std::vector<std::string> labels;  // "+" / "-", aligned with steps
};

ImageRecord to_record(const SyntheticImage& img);
SyntheticImage to_image(const ImageRecord& rec);

// ---- ingestion / emission ------------------------------------------------------

// Fail fast on the first malformed line; errors carry (line, field, reason).
// An empty file is an empty collection, not an error.
std::vector<PretrainRecord> ingest_pretrain_jsonl(const std::string& path);
std::vector<PreferenceRecord> ingest_preference_jsonl(const std::string& path);
std::vector<PrmRecord> ingest_prm_jsonl(const std::string& path);

void emit_pretrain_jsonl(const std::string& path, const std::vector<PretrainRecord>& records);
void emit_preference_jsonl(const std::string& path, const std::vector<PreferenceRecord>& records);
void emit_prm_jsonl(const std::string& path, const std::vector<PrmRecord>& records);

// ---- tokenized builders ---------------------------------------------------------

// Language:   <bos> text... target... <eos>
// Multimodal: <bos> <img> <imgctx>*n </img> text... target... <eos>
// Loss mask is true exactly on the target tokens and the trailing <eos>.
Sample build_sample(const PretrainRecord& rec, const Vocab& vocab, int n_visual);
// Prompt part only (no target, no <eos>, empty loss mask) -- generation input.
Sample build_prompt(const PretrainRecord& rec, const Vocab& vocab, int n_visual);
PreferencePair build_preference_pair(const PreferenceRecord& rec, const Vocab& vocab, int n_visual);
StepwiseSolution build_solution(const PrmRecord& rec, const Vocab& vocab);
PrmRecord to_prm_record(const StepwiseSolution& sol, const Vocab& vocab);

// ---- synthetic tasks ------------------------------------------------------------

struct GenConfig {
    int img_h = 16;
    int img_w = 16;
    int n_visual = 16;  // must match the model's post-unshuffle token count
};

// Captioning: the grid holds up to three colored shapes; the caption is derived
// from the grid by caption_for_grid (occupied cells in row-major order). The
// all-blank grid captions as "nothing".
std::string caption_for_grid(const SyntheticImage& img);
std::vector<PretrainRecord> gen_caption_task(Rng& rng, int n, const GenConfig& gc = {});

// Counting (pure language): prompt "count <n> :", target "<n+1> <n+2> <n+3>".
std::vector<PretrainRecord> gen_count_task(Rng& rng, int n);

// Two-step arithmetic over digits read from the image at cells (0,0) and (0,1).
// Question "<op1> then <op2>"; steps like "3 + 4 = 7" / "7 * 2 = 14".
struct ReasoningItem {
    SyntheticImage image;
    std::string question;
    std::vector<std::string> steps;
    int answer = 0;
};

std::vector<ReasoningItem> gen_reasoning_task(Rng& rng, int n, const GenConfig& gc = {});

// Perturbs the result of one step and recomputes the rest of the chain from the
// wrong value, so exactly that step is arithmetically invalid.
ReasoningItem corrupt_reasoning(Rng& rng, const ReasoningItem& item);

// Published per-step correctness rule: a step "x <op> y = z" is correct iff its
// operands continue the chain as stated by the question and the previous step,
// and z equals x <op> y. Returns one label (+1/-1) per step.
std::vector<int8_t> evaluate_steps(const SyntheticImage& image, const std::string& question,
                                   const std::vector<std::string>& steps);

// Derived corpora.
PretrainRecord reasoning_sft_record(const ReasoningItem& item);
PrmRecord reasoning_prm_record(const ReasoningItem& item);
// chosen = gold rendering, rejected = corrupted rendering of the same item.
PreferenceRecord reasoning_preference_record(Rng& rng, const ReasoningItem& item);
// Renders steps and answer: "s1 ; s2 ; answer <n>".
std::string reasoning_response_text(const ReasoningItem& item);

// ---- packing & mixture ------------------------------------------------------------

// Greedy first-fit by declining length (ties by original order). Every sample
// must fit the window alone; each emitted batch length is <= context_window.
std::vector<PackedBatch> pack(const std::vector<Sample>& samples, int64_t context_window);

PackedBatch pack_single(const Sample& sample);

// Per-token positions for a packed batch: computation restarts at p=0 for every
// sample, visual increments per image from delta_per_image.
PositionMap batch_positions(const PackedBatch& batch, const std::vector<double>& delta_per_image);

struct MixtureConfig {
    double language_weight = 1.0;
    double multimodal_weight = 3.0;
    uint64_t seed = 0;
};

// i.i.d. kind draws proportional to weights, uniform within the chosen pool,
// fully determined by cfg.seed.
std::vector<Sample> sample_mixture(const MixtureConfig& cfg, const std::vector<Sample>& language_pool,
                                   const std::vector<Sample>& multimodal_pool, int64_t n);

}  // namespace natimm
