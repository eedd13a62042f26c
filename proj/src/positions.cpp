#include "natimm/positions.hpp"

#include <algorithm>
#include <cmath>

namespace natimm {

bool is_valid_delta(double delta) {
    for (double d : kDeltaSet)
        if (d == delta) return true;
    return false;
}

double parse_delta(const std::string& text) {
    if (text == "1") return 1.0;
    if (text.rfind("1/", 0) == 0) {
        const std::string denom = text.substr(2);
        for (double d : kDeltaSet) {
            if (d == 1.0) continue;
            if (denom == std::to_string(static_cast<int64_t>(std::llround(1.0 / d)))) return d;
        }
    }
    throw ConfigError("not an admissible delta: \"" + text + "\" (expected 1, 1/2, ... 1/256)");
}

std::string delta_str(double delta) {
    if (!is_valid_delta(delta)) throw ContractError("delta_str: " + std::to_string(delta) + " not in the delta set");
    if (delta == 1.0) return "1";
    return "1/" + std::to_string(static_cast<int64_t>(std::llround(1.0 / delta)));
}

PositionMap compute_positions(const std::vector<Modality>& modality, const std::vector<ImageSpan>& spans,
                              const std::vector<double>& delta_per_image) {
    const int64_t n = static_cast<int64_t>(modality.size());
    // span id per token, -1 for none
    std::vector<int> span_of(static_cast<size_t>(n), -1);
    for (size_t si = 0; si < spans.size(); ++si) {
        const auto& sp = spans[si];
        if (sp.begin < 0 || sp.end > n || sp.begin >= sp.end)
            throw DataError("image span [" + std::to_string(sp.begin) + "," + std::to_string(sp.end) +
                            ") out of bounds for sequence of length " + std::to_string(n));
        if (sp.image_index < 0 || sp.image_index >= static_cast<int>(delta_per_image.size()))
            throw DataError("image span refers to image " + std::to_string(sp.image_index) + " but only " +
                            std::to_string(delta_per_image.size()) + " deltas were assigned");
        if (!is_valid_delta(delta_per_image[static_cast<size_t>(sp.image_index)]))
            throw ConfigError("delta " + std::to_string(delta_per_image[static_cast<size_t>(sp.image_index)]) +
                              " for image " + std::to_string(sp.image_index) + " is not in the admissible set");
        for (int64_t i = sp.begin; i < sp.end; ++i) {
            if (span_of[static_cast<size_t>(i)] != -1)
                throw DataError("token " + std::to_string(i) + " covered by two image spans");
            span_of[static_cast<size_t>(i)] = static_cast<int>(si);
        }
    }
    PositionMap out;
    out.delta_per_image = delta_per_image;
    out.positions.resize(static_cast<size_t>(n));
    double p = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        if (modality[static_cast<size_t>(i)] == Modality::visual) {
            if (span_of[static_cast<size_t>(i)] == -1)
                throw DataError("visual token at index " + std::to_string(i) + " belongs to no image span");
            if (i > 0) p += delta_per_image[static_cast<size_t>(spans[static_cast<size_t>(span_of[static_cast<size_t>(i)])].image_index)];
        } else {
            if (span_of[static_cast<size_t>(i)] != -1)
                throw DataError("text token at index " + std::to_string(i) + " lies inside an image span");
            if (i > 0) p += 1.0;
        }
        out.positions[static_cast<size_t>(i)] = p;
    }
    return out;
}

std::vector<double> sample_delta(Rng& rng, int images) {
    std::vector<double> out;
    out.reserve(static_cast<size_t>(std::max(images, 0)));
    for (int i = 0; i < images; ++i)
        out.push_back(kDeltaSet[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(kDeltaSet.size())))]);
    return out;
}

double choose_inference_delta(int64_t text_tokens, int64_t visual_tokens, int64_t context_window) {
    if (text_tokens < 0 || visual_tokens < 0) throw ContractError("choose_inference_delta: negative token count");
    if (context_window <= 0) throw ConfigError("choose_inference_delta: context window must be positive");
    const double text_extent = static_cast<double>(text_tokens - 1);
    for (double d : kDeltaSet) {  // largest first: prefer maximal positional resolution
        const double max_pos = text_extent + static_cast<double>(visual_tokens) * d;
        if (max_pos < static_cast<double>(context_window)) return d;
    }
    std::string needed = visual_tokens > 0
                             ? "would need delta < " + std::to_string((static_cast<double>(context_window) - text_extent) /
                                                                      static_cast<double>(visual_tokens))
                             : "text alone exceeds the window";
    throw CapacityError("no admissible delta fits " + std::to_string(text_tokens) + " text + " +
                        std::to_string(visual_tokens) + " visual tokens in window " +
                        std::to_string(context_window) + " (" + needed + ")");
}

std::vector<float> rotary_phases(const std::vector<double>& positions, int64_t head_dim, double base) {
    if (head_dim <= 0 || head_dim % 2 != 0)
        throw ConfigError("rotary_phases: head_dim must be even and positive, got " + std::to_string(head_dim));
    const int64_t half = head_dim / 2;
    std::vector<double> omega(static_cast<size_t>(half));
    for (int64_t j = 0; j < half; ++j)
        omega[static_cast<size_t>(j)] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
    std::vector<float> angles(positions.size() * static_cast<size_t>(half));
    for (size_t i = 0; i < positions.size(); ++i)
        for (int64_t j = 0; j < half; ++j)
            angles[i * static_cast<size_t>(half) + static_cast<size_t>(j)] =
                static_cast<float>(positions[i] * omega[static_cast<size_t>(j)]);
    return angles;
}

std::vector<float> rotary_phases(const PositionMap& positions, int64_t head_dim, double base) {
    return rotary_phases(positions.positions, head_dim, base);
}

}  // namespace natimm
