#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "natimm/data.hpp"
#include "natimm/positions.hpp"
#include "natimm/tensor.hpp"
#include "natimm/types.hpp"

namespace natimm {

struct ModelConfig {
    int64_t vocab_size = 256;
    int64_t d_model = 64;
    int64_t n_layers = 2;
    int64_t n_heads = 4;
    int64_t head_dim = 16;
    int64_t context_window = 512;
    int64_t patch_grid = 8;  // patches per image side; visual tokens after unshuffle = (patch_grid/2)^2
    int64_t projector_hidden = 128;
    int64_t vit_layers = 1;
    int64_t cells_per_patch = 2;  // image cells per patch side
    uint64_t seed = 0;

    int64_t n_visual_tokens() const { return (patch_grid / 2) * (patch_grid / 2); }
    int64_t image_cells() const { return patch_grid * cells_per_patch; }
    int64_t patch_input_dim() const { return cells_per_patch * cells_per_patch * kPaletteSize; }
    void validate() const;
};

// Pre-norm transformer block (attention + MLP), shared by the language model
// (causal, rotary) and the vision encoder (bidirectional, learned positions).
struct Block {
    Tensor norm1_g, wq, wk, wv, wo;
    Tensor norm2_g, w1, w2;
};

struct VisionEncoder {
    Tensor patch_w, patch_b;  // one-hot patch cells -> d_model
    Tensor pos_emb;           // learned, one row per patch
    std::vector<Block> blocks;
    Tensor final_norm_g;
};

struct Projector {
    Tensor w1, b1;  // 4*d_model -> hidden
    Tensor w2, b2;  // hidden -> d_model
};

struct LanguageModel {
    Tensor tok_emb;
    std::vector<Block> blocks;
    Tensor final_norm_g;
    Tensor head;
};

struct Model {
    ModelConfig cfg;
    VisionEncoder vit;
    Projector proj;
    LanguageModel lm;

    static Model init(const ModelConfig& cfg);

    // Stable registry order; checkpoint tensor order and optimizer slots follow it.
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    std::vector<Tensor> params() const;
    int64_t param_count() const;
    void zero_grad() const;
    // Independent copy of all weights (frozen reference model for preference training).
    Model clone() const;
};

// encoder -> pixel unshuffle -> projector; returns [n_visual_tokens x d_model].
Tensor encode_image(Tape* tape, const Model& model, const SyntheticImage& image);

// Re-use of vision encodings for repeated image content within one optimizer
// step (weights fixed across its forwards). Cached nodes stay on the tape, so
// gradients from every use accumulate into the shared subgraph.
using ImageCache = std::map<std::vector<int>, Tensor>;

// Causal forward over a packed batch. Attention is isolated per sample
// (block-diagonal causal mask); rotary phases come from the supplied positions.
// Max position must stay inside the context window (CapacityError otherwise).
// Returns logits [T x vocab].
Tensor model_forward(Tape* tape, const Model& model, const PackedBatch& batch, const PositionMap& positions,
                     ImageCache* image_cache = nullptr);

enum class GenMode { greedy, sample };

struct GenerateResult {
    Sample sequence;              // prompt plus generated tokens
    std::vector<int> new_tokens;  // generated suffix (without the prompt)
};

// Autoregressive decoding from a prompt sample. Greedy mode is deterministic;
// sample mode is deterministic given the rng seed. Stops at <eos> or max_new.
// Capacity: the prompt's max position plus max_new must fit the window.
GenerateResult generate(const Model& model, const Sample& prompt, const std::vector<double>& delta_per_image,
                        int max_new, GenMode mode, Rng* rng = nullptr);

}  // namespace natimm
