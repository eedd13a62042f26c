#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "natimm/positions.hpp"

namespace natimm {

// Cell palette shared by all synthetic images: 0 = blank, 1..16 = colored shape
// (color*4 + shape + 1), and the reasoning task reads cells 1..10 as digits 0..9.
inline constexpr int kPaletteSize = 17;

struct SyntheticImage {
    int h = 0;
    int w = 0;
    std::vector<int> cells;  // row-major, values in [0, kPaletteSize)

    int at(int row, int col) const { return cells[static_cast<size_t>(row * w + col)]; }
};

void validate_image(const SyntheticImage& img);

enum class SampleKind : uint8_t { language, multimodal };

// One training/eval unit: token ids with per-token modality and loss mask.
// Visual tokens are <imgctx> placeholders inside a structurally delimited span;
// the enclosing <img>/"</img>" markers are ordinary text tokens.
// loss_mask[i] means "token i is a prediction target that bears loss"; it is
// never set on index 0, on visual tokens, or on prompt tokens.
struct Sample {
    SampleKind kind = SampleKind::language;
    std::vector<int> tokens;
    std::vector<Modality> modality;
    std::vector<uint8_t> loss_mask;
    std::vector<ImageSpan> spans;          // structural image-span delimitation
    std::vector<SyntheticImage> images;    // indexed by ImageSpan::image_index

    int64_t length() const { return static_cast<int64_t>(tokens.size()); }
    int64_t loss_token_count() const;
};

// Throws DataError when a Sample invariant is broken (language sample with
// visual tokens, loss on a visual token, span/modality disagreement, ...).
void validate_sample(const Sample& s);

// (query, chosen, rejected) for preference optimization. Responses are
// text-only token id sequences ending in <eos>.
struct PreferencePair {
    Sample query;
    std::vector<int> chosen;
    std::vector<int> rejected;
};

// Question plus ordered reasoning steps; labels (+1/-1 per step) are present
// on training data and empty on candidates to be scored.
struct StepwiseSolution {
    std::optional<SyntheticImage> image;
    std::vector<int> question;
    std::vector<std::vector<int>> steps;
    std::vector<int8_t> labels;
    std::optional<int> answer;  // stated final answer, for reporting
};

// Samples concatenated into one sequence with per-token sample ids. No token
// attends across sample boundaries, and positions restart at 0 per sample.
struct PackedBatch {
    std::vector<int> tokens;
    std::vector<Modality> modality;
    std::vector<uint8_t> loss_mask;
    std::vector<int> sample_id;
    std::vector<int64_t> sample_begin;  // offset of each sample, plus total length at the end
    std::vector<int64_t> sample_loss_tokens;
    std::vector<ImageSpan> spans;  // re-based onto the packed sequence
    std::vector<SyntheticImage> images;

    int64_t length() const { return static_cast<int64_t>(tokens.size()); }
    int64_t num_samples() const { return static_cast<int64_t>(sample_begin.size()) - 1; }
};

}  // namespace natimm
