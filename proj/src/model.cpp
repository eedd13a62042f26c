#include "natimm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace natimm {

void ModelConfig::validate() const {
    if (d_model != n_heads * head_dim)
        throw ConfigError("d_model (" + std::to_string(d_model) + ") != n_heads*head_dim (" +
                          std::to_string(n_heads * head_dim) + ")");
    if (head_dim <= 0 || head_dim % 2 != 0)
        throw ConfigError("head_dim must be even and positive, got " + std::to_string(head_dim));
    if (vocab_size <= 8) throw ConfigError("vocab_size must exceed the reserved special tokens");
    if (n_layers <= 0 || vit_layers < 0 || n_heads <= 0) throw ConfigError("layer/head counts must be positive");
    if (context_window <= 0) throw ConfigError("context_window must be positive");
    if (patch_grid <= 0 || patch_grid % 2 != 0)
        throw ConfigError("patch_grid must be even and positive, got " + std::to_string(patch_grid));
    if (projector_hidden <= 0 || cells_per_patch <= 0) throw ConfigError("projector/patch dims must be positive");
}

namespace {

constexpr double kInitStd = 0.02;

Block init_block(Rng& rng, int64_t d, int64_t mlp_hidden) {
    Block b;
    b.norm1_g = Tensor::full({d}, 1.0f, true);
    b.wq = Tensor::randn({d, d}, rng, kInitStd, true);
    b.wk = Tensor::randn({d, d}, rng, kInitStd, true);
    b.wv = Tensor::randn({d, d}, rng, kInitStd, true);
    b.wo = Tensor::randn({d, d}, rng, kInitStd, true);
    b.norm2_g = Tensor::full({d}, 1.0f, true);
    b.w1 = Tensor::randn({d, mlp_hidden}, rng, kInitStd, true);
    b.w2 = Tensor::randn({mlp_hidden, d}, rng, kInitStd, true);
    return b;
}

void block_params(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix, const Block& b) {
    out.emplace_back(prefix + ".norm1_g", b.norm1_g);
    out.emplace_back(prefix + ".wq", b.wq);
    out.emplace_back(prefix + ".wk", b.wk);
    out.emplace_back(prefix + ".wv", b.wv);
    out.emplace_back(prefix + ".wo", b.wo);
    out.emplace_back(prefix + ".norm2_g", b.norm2_g);
    out.emplace_back(prefix + ".w1", b.w1);
    out.emplace_back(prefix + ".w2", b.w2);
}

// Shared block body. angles empty -> no rotary. mask nullptr -> bidirectional.
Tensor run_block(Tape* tape, const Block& blk, Tensor x, const std::vector<float>& angles, int64_t n_heads,
                 int64_t head_dim, const Tensor* mask) {
    Tensor h = rmsnorm(tape, x, blk.norm1_g);
    Tensor q = matmul(tape, h, blk.wq);
    Tensor k = matmul(tape, h, blk.wk);
    Tensor v = matmul(tape, h, blk.wv);
    if (!angles.empty()) {
        q = rotary_apply(tape, q, angles, head_dim);
        k = rotary_apply(tape, k, angles, head_dim);
    }
    std::vector<Tensor> head_ctx;
    head_ctx.reserve(static_cast<size_t>(n_heads));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (int64_t hh = 0; hh < n_heads; ++hh) {
        Tensor qh = slice_cols(tape, q, hh * head_dim, (hh + 1) * head_dim);
        Tensor kh = slice_cols(tape, k, hh * head_dim, (hh + 1) * head_dim);
        Tensor vh = slice_cols(tape, v, hh * head_dim, (hh + 1) * head_dim);
        Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt);
        Tensor probs = softmax_rows(tape, scores, mask);
        head_ctx.push_back(matmul(tape, probs, vh));
    }
    Tensor ctx = n_heads == 1 ? head_ctx[0] : concat_cols(tape, head_ctx);
    x = add(tape, x, matmul(tape, ctx, blk.wo));
    Tensor h2 = rmsnorm(tape, x, blk.norm2_g);
    Tensor m = matmul(tape, gelu(tape, matmul(tape, h2, blk.w1)), blk.w2);
    return add(tape, x, m);
}

}  // namespace

Model Model::init(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng = derive_rng(cfg.seed, "model-init");
    Model m;
    m.cfg = cfg;
    const int64_t d = cfg.d_model;
    m.vit.patch_w = Tensor::randn({cfg.patch_input_dim(), d}, rng, kInitStd, true);
    m.vit.patch_b = Tensor::zeros({d}, true);
    m.vit.pos_emb = Tensor::randn({cfg.patch_grid * cfg.patch_grid, d}, rng, kInitStd, true);
    for (int64_t i = 0; i < cfg.vit_layers; ++i) m.vit.blocks.push_back(init_block(rng, d, 2 * d));
    m.vit.final_norm_g = Tensor::full({d}, 1.0f, true);
    m.proj.w1 = Tensor::randn({4 * d, cfg.projector_hidden}, rng, kInitStd, true);
    m.proj.b1 = Tensor::zeros({cfg.projector_hidden}, true);
    m.proj.w2 = Tensor::randn({cfg.projector_hidden, d}, rng, kInitStd, true);
    m.proj.b2 = Tensor::zeros({d}, true);
    m.lm.tok_emb = Tensor::randn({cfg.vocab_size, d}, rng, kInitStd, true);
    for (int64_t i = 0; i < cfg.n_layers; ++i) m.lm.blocks.push_back(init_block(rng, d, 4 * d));
    m.lm.final_norm_g = Tensor::full({d}, 1.0f, true);
    m.lm.head = Tensor::randn({d, cfg.vocab_size}, rng, kInitStd, true);
    return m;
}

std::vector<std::pair<std::string, Tensor>> Model::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("vit.patch_w", vit.patch_w);
    out.emplace_back("vit.patch_b", vit.patch_b);
    out.emplace_back("vit.pos_emb", vit.pos_emb);
    for (size_t i = 0; i < vit.blocks.size(); ++i) block_params(out, "vit.block" + std::to_string(i), vit.blocks[i]);
    out.emplace_back("vit.final_norm_g", vit.final_norm_g);
    out.emplace_back("proj.w1", proj.w1);
    out.emplace_back("proj.b1", proj.b1);
    out.emplace_back("proj.w2", proj.w2);
    out.emplace_back("proj.b2", proj.b2);
    out.emplace_back("lm.tok_emb", lm.tok_emb);
    for (size_t i = 0; i < lm.blocks.size(); ++i) block_params(out, "lm.block" + std::to_string(i), lm.blocks[i]);
    out.emplace_back("lm.final_norm_g", lm.final_norm_g);
    out.emplace_back("lm.head", lm.head);
    return out;
}

std::vector<Tensor> Model::params() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
}

int64_t Model::param_count() const {
    int64_t n = 0;
    for (const auto& t : params()) n += t.numel();
    return n;
}

void Model::zero_grad() const { zero_grads(params()); }

Model Model::clone() const {
    Model copy = Model::init(cfg);
    auto src = params();
    auto dst = copy.params();
    for (size_t i = 0; i < src.size(); ++i)
        std::copy_n(src[i].data().data(), src[i].data().size(), dst[i].data().data());
    return copy;
}

// ---- vision path -------------------------------------------------------------

Tensor encode_image(Tape* tape, const Model& model, const SyntheticImage& image) {
    const auto& cfg = model.cfg;
    validate_image(image);
    const int64_t cpp = cfg.cells_per_patch;
    if (image.h != cfg.image_cells() || image.w != cfg.image_cells())
        throw DataError("image is " + std::to_string(image.h) + "x" + std::to_string(image.w) + ", model expects " +
                        std::to_string(cfg.image_cells()) + "x" + std::to_string(cfg.image_cells()) +
                        " (patch_grid " + std::to_string(cfg.patch_grid) + " of " + std::to_string(cpp) + "x" +
                        std::to_string(cpp) + " cells)");
    const int64_t pg = cfg.patch_grid;
    const int64_t in_dim = cfg.patch_input_dim();
    // one-hot cell features per patch, cells in row-major order within the patch
    std::vector<float> feat(static_cast<size_t>(pg * pg * in_dim), 0.0f);
    for (int64_t pi = 0; pi < pg; ++pi)
        for (int64_t pj = 0; pj < pg; ++pj) {
            const int64_t patch = pi * pg + pj;
            for (int64_t ci = 0; ci < cpp; ++ci)
                for (int64_t cj = 0; cj < cpp; ++cj) {
                    const int v = image.at(static_cast<int>(pi * cpp + ci), static_cast<int>(pj * cpp + cj));
                    feat[static_cast<size_t>(patch * in_dim + (ci * cpp + cj) * kPaletteSize + v)] = 1.0f;
                }
        }
    Tensor x = Tensor::from_data({pg * pg, in_dim}, std::move(feat));
    x = add_rowvec(tape, matmul(tape, x, model.vit.patch_w), model.vit.patch_b);
    x = add(tape, x, model.vit.pos_emb);
    for (const auto& blk : model.vit.blocks)
        x = run_block(tape, blk, x, {}, cfg.n_heads, cfg.head_dim, nullptr);
    x = rmsnorm(tape, x, model.vit.final_norm_g);
    x = pixel_unshuffle(tape, x, pg, pg);  // grid shape matches the patch grid until here
    x = add_rowvec(tape, matmul(tape, x, model.proj.w1), model.proj.b1);
    x = gelu(tape, x);
    x = add_rowvec(tape, matmul(tape, x, model.proj.w2), model.proj.b2);
    return x;
}

// ---- language path -----------------------------------------------------------

namespace {

// Block-diagonal causal mask: token i attends to j iff same sample and j <= i.
Tensor isolation_mask(const PackedBatch& batch) {
    const int64_t n = batch.length();
    Tensor mask = Tensor::zeros({n, n});
    auto pm = mask.data();
    const float neg_inf = -std::numeric_limits<float>::infinity();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            if (j > i || batch.sample_id[static_cast<size_t>(i)] != batch.sample_id[static_cast<size_t>(j)])
                pm[static_cast<size_t>(i * n + j)] = neg_inf;
    return mask;
}

}  // namespace

Tensor model_forward(Tape* tape, const Model& model, const PackedBatch& batch, const PositionMap& positions,
                     ImageCache* image_cache) {
    const auto& cfg = model.cfg;
    const int64_t n = batch.length();
    if (n == 0) throw ContractError("model_forward: empty batch");
    if (static_cast<int64_t>(positions.positions.size()) != n)
        throw ContractError("model_forward: positions (" + std::to_string(positions.positions.size()) +
                            ") do not match batch length (" + std::to_string(n) + ")");
    double max_pos = 0.0;
    for (double p : positions.positions) max_pos = std::max(max_pos, p);
    if (max_pos >= static_cast<double>(cfg.context_window))
        throw CapacityError("max position " + std::to_string(max_pos) + " exceeds context window " +
                            std::to_string(cfg.context_window));
    for (int t : batch.tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw DataError("token id " + std::to_string(t) + " outside model vocabulary of " +
                            std::to_string(cfg.vocab_size));

    Tensor x = embedding_gather(tape, model.lm.tok_emb, batch.tokens);
    for (const auto& span : batch.spans) {
        const SyntheticImage& img = batch.images[static_cast<size_t>(span.image_index)];
        Tensor vis;
        if (image_cache) {
            auto it = image_cache->find(img.cells);
            if (it != image_cache->end()) vis = it->second;
        }
        if (!vis.defined()) {
            vis = encode_image(tape, model, img);
            if (image_cache) image_cache->emplace(img.cells, vis);
        }
        if (vis.dim(0) != span.end - span.begin)
            throw DataError("image span of " + std::to_string(span.end - span.begin) + " tokens but encoder yields " +
                            std::to_string(vis.dim(0)));
        x = splice_rows(tape, x, span.begin, vis);
    }
    Tensor mask = isolation_mask(batch);
    const std::vector<float> angles = rotary_phases(positions, cfg.head_dim);
    for (const auto& blk : model.lm.blocks)
        x = run_block(tape, blk, x, angles, cfg.n_heads, cfg.head_dim, &mask);
    x = rmsnorm(tape, x, model.lm.final_norm_g);
    return matmul(tape, x, model.lm.head);
}

GenerateResult generate(const Model& model, const Sample& prompt, const std::vector<double>& delta_per_image,
                        int max_new, GenMode mode, Rng* rng) {
    if (mode == GenMode::sample && rng == nullptr) throw ContractError("generate: sample mode needs an rng");
    if (max_new < 0) throw ContractError("generate: max_new must be >= 0");
    validate_sample(prompt);
    GenerateResult res;
    res.sequence = prompt;
    {
        PackedBatch b = pack_single(prompt);
        PositionMap pm = batch_positions(b, delta_per_image);
        const double last = pm.positions.empty() ? 0.0 : pm.positions.back();
        if (last + static_cast<double>(max_new) >= static_cast<double>(model.cfg.context_window))
            throw CapacityError("prompt at position " + std::to_string(last) + " leaves no headroom for " +
                                std::to_string(max_new) + " new tokens in window " +
                                std::to_string(model.cfg.context_window));
    }
    for (int step = 0; step < max_new; ++step) {
        PackedBatch b = pack_single(res.sequence);
        PositionMap pm = batch_positions(b, delta_per_image);
        Tensor logits = model_forward(nullptr, model, b, pm);
        const int64_t v = logits.dim(1);
        const float* row = logits.data().data() + static_cast<size_t>((logits.dim(0) - 1) * v);
        int next = 0;
        if (mode == GenMode::greedy) {
            for (int64_t j = 1; j < v; ++j)
                if (row[j] > row[next]) next = static_cast<int>(j);
        } else {
            double mx = row[0];
            for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double denom = 0.0;
            std::vector<double> e(static_cast<size_t>(v));
            for (int64_t j = 0; j < v; ++j) {
                e[static_cast<size_t>(j)] = std::exp(static_cast<double>(row[j]) - mx);
                denom += e[static_cast<size_t>(j)];
            }
            const double u = rng->uniform() * denom;
            double acc = 0.0;
            next = static_cast<int>(v) - 1;
            for (int64_t j = 0; j < v; ++j) {
                acc += e[static_cast<size_t>(j)];
                if (u < acc) {
                    next = static_cast<int>(j);
                    break;
                }
            }
        }
        res.sequence.tokens.push_back(next);
        res.sequence.modality.push_back(Modality::text);
        res.sequence.loss_mask.push_back(0);
        res.new_tokens.push_back(next);
        if (next == tok::eos) break;
    }
    return res;
}

}  // namespace natimm
