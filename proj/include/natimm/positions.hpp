#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "natimm/common.hpp"

namespace natimm {

enum class Modality : uint8_t { text, visual };

// Admissible visual position increments, largest first.
inline constexpr std::array<double, 9> kDeltaSet = {
    1.0, 1.0 / 2, 1.0 / 4, 1.0 / 8, 1.0 / 16, 1.0 / 32, 1.0 / 64, 1.0 / 128, 1.0 / 256,
};

bool is_valid_delta(double delta);
// "1", "1/2", ... "1/256" <-> value. Parse errors -> ConfigError.
double parse_delta(const std::string& text);
std::string delta_str(double delta);

// Contiguous run of visual tokens belonging to one image.
struct ImageSpan {
    int64_t begin = 0;  // first visual token index
    int64_t end = 0;    // one past last
    int image_index = 0;
};

// Real-valued position index per token. Positions are computed in double and
// only narrowed to float at rotary phase evaluation, so 1/256 increments do not
// drift over long sequences.
struct PositionMap {
    std::vector<double> positions;
    std::vector<double> delta_per_image;  // indexed by image_index
};

// Recursive modality-aware assignment: p_0 = 0, then +1 for text tokens and
// +delta(image) for visual tokens. Every visual token must be covered by
// exactly one span with a delta from the admissible set.
PositionMap compute_positions(const std::vector<Modality>& modality, const std::vector<ImageSpan>& spans,
                              const std::vector<double>& delta_per_image);

// Uniform draw from the delta set, independently per image.
std::vector<double> sample_delta(Rng& rng, int images);

// Largest admissible delta whose maximum position stays inside the context
// window: (text_tokens - 1) + visual_tokens * delta < context_window.
// No admissible delta fits -> CapacityError reporting the required bound.
double choose_inference_delta(int64_t text_tokens, int64_t visual_tokens, int64_t context_window);

// Rotation angles for rotary attention: angle[i][j] = p_i * base^(-2j/head_dim),
// j over feature pairs, base 10000. Flattened row-major [len x head_dim/2].
std::vector<float> rotary_phases(const PositionMap& positions, int64_t head_dim, double base = 10000.0);
std::vector<float> rotary_phases(const std::vector<double>& positions, int64_t head_dim, double base = 10000.0);

}  // namespace natimm
