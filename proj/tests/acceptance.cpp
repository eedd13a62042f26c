// Acceptance suite: runs every acceptance criterion end to end and prints one
// PASS/FAIL line per criterion. Exit code is the number of failed criteria.
//
//   acceptance [--only N] [--workdir PATH]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gradcheck.hpp"
#include "natimm/trainer.hpp"
#include "oracle_double.hpp"

using namespace natimm;

namespace {

constexpr uint64_t kSeed = 20250808;
constexpr uint64_t kDataSeed = 11;

std::filesystem::path g_work;

std::string work(const std::string& name) { return (g_work / name).string(); }

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

struct Criterion {
    int id;
    const char* name;
    std::function<std::string(bool&)> run;  // returns detail text, sets pass
};

double now_seconds() {
    using clock = std::chrono::steady_clock;
    static const clock::time_point start = clock::now();
    return std::chrono::duration<double>(clock::now() - start).count();
}

std::string fmt(double v, int prec = 3) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(prec);
    os << v;
    return os.str();
}

// ---- shared run configurations -------------------------------------------------

RunConfig base_run(Stage stage) {
    RunConfig cfg;
    cfg.stage = stage;
    cfg.seed = kSeed;
    cfg.data_seed = kDataSeed;
    cfg.batch_size = 16;
    cfg.pack_window = 160;
    cfg.weighting = WeightingScheme::square_averaging;
    cfg.optimizer.lr = 4e-3;
    cfg.optimizer.beta2 = 0.99;
    cfg.lr_decay = true;
    cfg.n_caption = 64;
    cfg.n_count = 64;
    cfg.eval_n = 100;
    cfg.eval_pairs = 100;
    cfg.max_new = 24;
    return cfg;
}

EvalRow eval_checkpoint(const std::string& ckpt) {
    RunConfig ev = base_run(Stage::eval);
    ev.ckpt_in = ckpt;
    ev.delta_policy = DeltaPolicy::fixed;
    ev.delta_value = 1.0;
    EvalReport rep = run_eval(ev);
    return rep.rows.at(0);
}

// Teacher-forced loss-token accuracy of a checkpoint over its held-in pools
// (cheaper than a full eval; criterion 7 needs only these numbers).
struct PoolAccuracy {
    double text = 0.0;
    double caption = 0.0;
};

PoolAccuracy teacher_forced_accuracy(const std::string& ckpt) {
    Vocab vocab = Vocab::builtin();
    Model model = load_model(Checkpoint::load(ckpt), nullptr, nullptr);
    const int n_visual = static_cast<int>(model.cfg.n_visual_tokens());
    GenConfig gc;
    gc.img_h = gc.img_w = static_cast<int>(model.cfg.image_cells());
    gc.n_visual = n_visual;
    auto accuracy = [&](const std::vector<PretrainRecord>& recs) {
        int64_t correct = 0, total = 0;
        for (const auto& rec : recs) {
            PackedBatch b = pack_single(build_sample(rec, vocab, n_visual));
            PositionMap pm = batch_positions(b, std::vector<double>(b.images.size(), 1.0));
            Tensor logits = model_forward(nullptr, model, b, pm);
            PretrainLossInfo info;
            pretrain_loss_on_logits(nullptr, logits, b, WeightingScheme::square_averaging, &info);
            correct += info.correct;
            total += info.loss_tokens;
        }
        return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    };
    Rng crng = derive_rng(kDataSeed, "caption");
    Rng trng = derive_rng(kDataSeed, "count");
    PoolAccuracy out;
    out.caption = accuracy(gen_caption_task(crng, 64, gc));
    out.text = accuracy(gen_count_task(trng, 64));
    return out;
}

// Held-out preference margin and reasoning accuracy (criterion 8's metrics).
struct PostTrainEval {
    double margin = 0.0;
    double reasoning = 0.0;
};

PostTrainEval post_train_eval(const std::string& ckpt) {
    Vocab vocab = Vocab::builtin();
    Model model = load_model(Checkpoint::load(ckpt), nullptr, nullptr);
    RunConfig cfg = base_run(Stage::eval);
    cfg.model = model.cfg;
    PostTrainEval out;
    out.margin = mean_margin(model, heldout_pairs(cfg, vocab, 100), {1.0});
    GenConfig gc;
    gc.img_h = gc.img_w = static_cast<int>(model.cfg.image_cells());
    gc.n_visual = static_cast<int>(model.cfg.n_visual_tokens());
    Rng hrng = derive_rng(kDataSeed, "reasoning-heldout");
    out.reasoning = reasoning_accuracy(model, vocab, gen_reasoning_task(hrng, 100, gc), 24);
    return out;
}

// Caption-only overfit (criterion 7a).
RunConfig caption_run_config() {
    RunConfig cfg = base_run(Stage::pretrain);
    cfg.steps = 2000;
    cfg.mixture.language_weight = 0.0;
    cfg.mixture.multimodal_weight = 1.0;
    cfg.delta_policy = DeltaPolicy::sample;
    cfg.ckpt_out = work("caption.nimm");
    cfg.metrics_out = work("caption.metrics.jsonl");
    return cfg;
}

// Joint 1:3 language:multimodal run (criterion 7b, feeds criterion 8).
RunConfig joint_run_config() {
    RunConfig cfg = base_run(Stage::pretrain);
    cfg.steps = 2000;
    cfg.mixture.language_weight = 1.0;
    cfg.mixture.multimodal_weight = 3.0;
    cfg.delta_policy = DeltaPolicy::sample;
    cfg.ckpt_out = work("joint.nimm");
    cfg.metrics_out = work("joint.metrics.jsonl");
    return cfg;
}

void ensure_joint_checkpoint() {
    if (std::filesystem::exists(work("joint.nimm"))) return;
    std::cerr << "  [prereq] building the joint pretrain checkpoint...\n";
    run_pretrain(joint_run_config());
}

ModelConfig small_model(uint64_t seed) {
    ModelConfig cfg;
    cfg.vocab_size = 256;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.head_dim = 8;
    cfg.context_window = 256;
    cfg.patch_grid = 4;
    cfg.projector_hidden = 16;
    cfg.vit_layers = 1;
    cfg.seed = seed;
    return cfg;
}

std::vector<Sample> mixed_corpus(const Vocab& vocab, int n, uint64_t seed) {
    Rng rng(seed);
    GenConfig gc{8, 8, 4};
    std::vector<Sample> out;
    for (const auto& r : gen_caption_task(rng, (n + 1) / 2, gc)) out.push_back(build_sample(r, vocab, 4));
    for (const auto& r : gen_count_task(rng, n / 2)) out.push_back(build_sample(r, vocab, 4));
    out.resize(static_cast<size_t>(n));
    return out;
}

// ---- criterion 1: gradient integrity -----------------------------------------------

std::string criterion_gradients(bool& pass) {
    const double t0 = now_seconds();
    double worst_ratio = 0.0;
    std::string worst_what;
    pass = true;
    auto track = [&](const GradCheckResult& res, const std::string& what) {
        if (res.worst_ratio > worst_ratio) {
            worst_ratio = res.worst_ratio;
            worst_what = what + " " + res.worst_param;
        }
        if (!res.ok) pass = false;
    };

    // every differentiable op, 10 seeds
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed + 500);
        Tensor a = Tensor::randn({4, 6}, rng, 1.0, true);
        Tensor b = Tensor::randn({4, 6}, rng, 1.0, true);
        Tensor bias = Tensor::randn({6}, rng, 1.0, true);
        Tensor gain = Tensor::randn({6}, rng, 1.0, true);
        Tensor m1 = Tensor::randn({5, 7}, rng, 1.0, true);
        Tensor m2 = Tensor::randn({7, 3}, rng, 1.0, true);
        Tensor rot = Tensor::randn({5, 8}, rng, 1.0, true);
        Tensor grid = Tensor::randn({16, 3}, rng, 1.0, true);
        auto coeffs = [&rng](const Shape& s) {
            Tensor c = Tensor::zeros(s);
            for (auto& x : c.data()) x = rng.uniform() < 0.5 ? -1.0f : 1.0f;
            return c;
        };
        std::vector<double> pos = {0.0, 1.0, 1.5, 2.25, 3.0};
        auto angles = rotary_phases(pos, 4);

        struct OpCase {
            const char* name;
            std::function<Tensor(Tape*)> fwd;
            std::function<oracle::DMat()> mirror;
            std::vector<std::pair<std::string, Tensor>> params;
        };
        using oracle::from_tensor;
        std::vector<OpCase> cases;
        cases.push_back({"matmul", [&](Tape* t) { return matmul(t, m1, m2); },
                         [&] { return oracle::matmul(from_tensor(m1), from_tensor(m2)); },
                         {{"a", m1}, {"b", m2}}});
        cases.push_back({"add", [&](Tape* t) { return add(t, a, b); },
                         [&] { return oracle::add(from_tensor(a), from_tensor(b)); },
                         {{"a", a}, {"b", b}}});
        cases.push_back({"mul", [&](Tape* t) { return mul(t, a, b); },
                         [&] { return oracle::mul(from_tensor(a), from_tensor(b)); },
                         {{"a", a}, {"b", b}}});
        cases.push_back({"gelu", [&](Tape* t) { return gelu(t, a); },
                         [&] { return oracle::gelu(from_tensor(a)); },
                         {{"a", a}}});
        cases.push_back({"softplus", [&](Tape* t) { return softplus(t, a); },
                         [&] { return oracle::softplus(from_tensor(a)); },
                         {{"a", a}}});
        cases.push_back({"add_rowvec", [&](Tape* t) { return add_rowvec(t, a, bias); },
                         [&] { return oracle::add_rowvec(from_tensor(a), from_tensor(bias)); },
                         {{"a", a}, {"bias", bias}}});
        cases.push_back({"rmsnorm", [&](Tape* t) { return rmsnorm(t, a, gain); },
                         [&] { return oracle::rmsnorm(from_tensor(a), from_tensor(gain)); },
                         {{"a", a}, {"gain", gain}}});
        cases.push_back({"softmax", [&](Tape* t) { return softmax_rows(t, a); },
                         [&] { return oracle::softmax_rows(from_tensor(a)); },
                         {{"a", a}}});
        cases.push_back({"rotary", [&](Tape* t) { return rotary_apply(t, rot, angles, 4); },
                         [&] { return oracle::rotary_apply(from_tensor(rot), angles, 4); },
                         {{"x", rot}}});
        cases.push_back({"unshuffle", [&](Tape* t) { return pixel_unshuffle(t, grid, 4, 4); },
                         [&] { return oracle::pixel_unshuffle(from_tensor(grid), 4, 4); },
                         {{"g", grid}}});
        for (auto& cse : cases) {
            for (auto& [n, p] : cse.params) p.zero_grad();
            Tape tape;
            Tensor out = cse.fwd(&tape);
            Tensor cc = coeffs(out.shape());
            tape.backward(sum(&tape, mul(&tape, out, cc)));
            track(check_gradients(cse.params, [&] { return oracle::dot(cse.mirror(), cc); }), cse.name);
        }
        // cross entropy
        {
            Tensor logits = Tensor::randn({4, 10}, rng, 1.5, true);
            std::vector<int> targets;
            std::vector<float> weights;
            for (int i = 0; i < 4; ++i) {
                targets.push_back(static_cast<int>(rng.uniform_int(10)));
                weights.push_back(static_cast<float>(rng.uniform()));
            }
            Tape tape;
            tape.backward(softmax_cross_entropy(&tape, logits, targets, weights));
            track(check_gradients(
                      {{"logits", logits}},
                      [&] { return oracle::cross_entropy(oracle::from_tensor(logits), targets, weights); }),
                  "cross_entropy");
        }
    }

    // full toy model, 10 seeds, <= 5k parameters
    int64_t params_checked = 0;
    for (uint64_t seed = 0; seed < 10; ++seed) {
        ModelConfig cfg;
        cfg.vocab_size = 12;
        cfg.d_model = 8;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.head_dim = 4;
        cfg.context_window = 64;
        cfg.patch_grid = 2;
        cfg.projector_hidden = 8;
        cfg.vit_layers = 1;
        cfg.seed = seed;
        Model model = Model::init(cfg);
        if (model.param_count() > 5000) {
            pass = false;
            return "finite-difference model exceeds 5k parameters";
        }
        params_checked = model.param_count();
        gradcheck_test_point(model, seed);
        Sample s;
        s.kind = SampleKind::multimodal;
        s.tokens = {tok::bos, tok::img_begin, tok::img_ctx, tok::img_end, 8, 9, 10, 11, tok::eos};
        s.modality.assign(s.tokens.size(), Modality::text);
        s.modality[2] = Modality::visual;
        s.loss_mask.assign(s.tokens.size(), 0);
        for (size_t i = 4; i < s.tokens.size(); ++i) s.loss_mask[i] = 1;
        s.spans.push_back({2, 3, 0});
        SyntheticImage img{4, 4, std::vector<int>(16, 0)};
        img.cells[0] = 3;
        img.cells[5] = 7;
        s.images.push_back(img);
        PackedBatch b = pack_single(s);
        PositionMap pm = batch_positions(b, {0.5});
        Tape tape;
        Tensor loss = pretrain_loss(&tape, model, b, pm, WeightingScheme::square_averaging);
        tape.backward(loss);
        track(check_gradients(
                  model.named_params(),
                  [&] { return oracle::pretrain_loss_mirror(model, b, pm, WeightingScheme::square_averaging); }),
              "model seed " + std::to_string(seed));
    }
    const double secs = now_seconds() - t0;
    if (secs >= 60.0) pass = false;
    return "ops + " + std::to_string(params_checked) + "-param model over 10 seeds, worst diff/allowed " +
           fmt(worst_ratio, 3) + " (" + worst_what + "), " + fmt(secs, 1) + "s (limit 60)";
}

// ---- criterion 2: V2PE correctness ---------------------------------------------------

std::string criterion_v2pe(bool& pass) {
    const double t0 = now_seconds();
    pass = true;
    // scalar recursion oracle over 1000 random mixed sequences, every delta
    Rng rng(2024);
    int64_t checked = 0;
    for (int trial = 0; trial < 1000 && pass; ++trial) {
        const int len = 2 + static_cast<int>(rng.uniform_int(120));
        std::vector<Modality> mod;
        std::vector<ImageSpan> spans;
        int images = 0;
        int i = 0;
        while (i < len) {
            if (rng.uniform() < 0.3 && i > 0) {
                const int end = std::min(len, i + 1 + static_cast<int>(rng.uniform_int(10)));
                spans.push_back(ImageSpan{i, end, images++});
                for (; i < end; ++i) mod.push_back(Modality::visual);
            } else {
                mod.push_back(Modality::text);
                ++i;
            }
        }
        for (double d : kDeltaSet) {
            std::vector<double> deltas(static_cast<size_t>(images), d);
            PositionMap pm = compute_positions(mod, spans, deltas);
            // independent scalar recursion
            double p = 0.0;
            for (size_t t = 0; t < mod.size(); ++t) {
                if (t > 0) {
                    double inc = 1.0;
                    if (mod[t] == Modality::visual) {
                        for (const auto& sp : spans)
                            if (static_cast<int64_t>(t) >= sp.begin && static_cast<int64_t>(t) < sp.end)
                                inc = deltas[static_cast<size_t>(sp.image_index)];
                    }
                    p += inc;
                }
                if (pm.positions[t] != p) pass = false;
                ++checked;
            }
        }
    }
    // delta=1 forward bit-identical to the plain-arange baseline
    Vocab vocab = Vocab::builtin();
    Model model = Model::init(small_model(3));
    auto samples = mixed_corpus(vocab, 4, 90);
    auto batches = pack(samples, 256);
    int64_t compared = 0;
    for (const auto& b : batches) {
        PositionMap v2pe = batch_positions(b, std::vector<double>(b.images.size(), 1.0));
        PositionMap arange;
        for (int64_t si = 0; si < b.num_samples(); ++si) {
            const int64_t len =
                b.sample_begin[static_cast<size_t>(si) + 1] - b.sample_begin[static_cast<size_t>(si)];
            for (int64_t t = 0; t < len; ++t) arange.positions.push_back(static_cast<double>(t));
        }
        Tensor x = model_forward(nullptr, model, b, v2pe);
        Tensor y = model_forward(nullptr, model, b, arange);
        for (size_t j = 0; j < x.data().size(); ++j) {
            if (x.data()[j] != y.data()[j]) pass = false;
            ++compared;
        }
    }
    const double secs = now_seconds() - t0;
    if (secs >= 30.0) pass = false;
    return std::to_string(checked) + " oracle positions over 1000 sequences x 9 deltas; " +
           std::to_string(compared) + " logits bit-compared to the arange baseline, " + fmt(secs, 1) +
           "s (limit 30)";
}

// ---- criterion 3: masked-loss contract ---------------------------------------------------

std::string criterion_masked_loss(bool& pass) {
    const double t0 = now_seconds();
    pass = true;
    Vocab vocab = Vocab::builtin();
    Model model = Model::init(small_model(5));
    auto samples = mixed_corpus(vocab, 6, 91);
    auto batches = pack(samples, 256);
    int64_t zero_checked = 0;
    bool vision_grad = false;
    for (const auto& b : batches) {
        PositionMap pm = batch_positions(b, std::vector<double>(b.images.size(), 0.5));
        Tape tape;
        Tensor logits = model_forward(&tape, model, b, pm);
        Tensor loss = pretrain_loss_on_logits(&tape, logits, b, WeightingScheme::square_averaging, nullptr);
        tape.backward(loss);
        std::vector<bool> loss_row(static_cast<size_t>(b.length()), false);
        for (int64_t i = 1; i < b.length(); ++i)
            if (b.loss_mask[static_cast<size_t>(i)] &&
                b.sample_id[static_cast<size_t>(i)] == b.sample_id[static_cast<size_t>(i - 1)])
                loss_row[static_cast<size_t>(i - 1)] = true;
        auto g = logits.grad();
        const int64_t v = logits.dim(1);
        for (int64_t i = 0; i < b.length(); ++i) {
            if (loss_row[static_cast<size_t>(i)]) continue;
            for (int64_t j = 0; j < v; ++j) {
                if (g[static_cast<size_t>(i * v + j)] != 0.0f) pass = false;
                ++zero_checked;
            }
        }
    }
    for (const auto& [name, t] : model.named_params()) {
        if (name.rfind("vit.", 0) != 0 && name.rfind("proj.", 0) != 0) continue;
        for (float g : t.grad_if_any())
            if (g != 0.0f) vision_grad = true;
    }
    if (!vision_grad) pass = false;
    const double secs = now_seconds() - t0;
    if (secs >= 10.0) pass = false;
    return std::to_string(zero_checked) + " non-loss logit gradients machine-zero; vision-path gradients " +
           (vision_grad ? "nonzero" : "ZERO") + ", " + fmt(secs, 1) + "s (limit 10)";
}

// ---- criterion 4: weighting algebra --------------------------------------------------------

std::string criterion_weighting(bool& pass) {
    pass = true;
    for (int64_t l = 1; l <= 100; ++l) {
        const double token_total = static_cast<double>(l) * token_weight(WeightingScheme::token_averaging, l);
        const double square_total = static_cast<double>(l) * token_weight(WeightingScheme::square_averaging, l);
        const double sample_total = static_cast<double>(l) * token_weight(WeightingScheme::sample_averaging, l);
        if (token_total != static_cast<double>(l)) pass = false;
        if (std::abs(square_total - std::sqrt(static_cast<double>(l))) >
            1e-12 * std::sqrt(static_cast<double>(l)))
            pass = false;
        if (std::abs(sample_total - 1.0) > 1e-12) pass = false;
    }
    return "token/square/sample totals equal l, sqrt(l), 1 for every l in 1..100";
}

// ---- criterion 5: packing equivalence --------------------------------------------------------

std::string criterion_packing(bool& pass) {
    pass = true;
    Vocab vocab = Vocab::builtin();
    Model model = Model::init(small_model(7));
    Rng rng(404);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        auto samples = mixed_corpus(vocab, 2 + static_cast<int>(rng.uniform_int(6)), 1000 + static_cast<uint64_t>(trial));
        const double delta = kDeltaSet[static_cast<size_t>(rng.uniform_int(9))];
        auto batches = pack(samples, 256);
        double packed = 0.0, weight = 0.0;
        for (const auto& b : batches) {
            PositionMap pm = batch_positions(b, std::vector<double>(b.images.size(), delta));
            PretrainLossInfo info;
            pretrain_loss(nullptr, model, b, pm, WeightingScheme::square_averaging, &info);
            packed += info.weighted_sum;
            weight += info.weight_total;
        }
        double unpacked = 0.0;
        for (const auto& s : samples) {
            PackedBatch b = pack_single(s);
            PositionMap pm = batch_positions(b, std::vector<double>(b.images.size(), delta));
            PretrainLossInfo info;
            pretrain_loss(nullptr, model, b, pm, WeightingScheme::square_averaging, &info);
            unpacked += info.weighted_sum;
        }
        const double diff = std::abs(packed / weight - unpacked / weight);
        worst = std::max(worst, diff);
        if (diff >= 1e-5) pass = false;
    }
    return "200 random sample sets, worst packed-vs-unpacked loss difference " + fmt(worst, 9) + " (< 1e-5)";
}

// ---- criterion 6: mixture ratio -----------------------------------------------------------------

std::string criterion_mixture(bool& pass) {
    Vocab vocab = Vocab::builtin();
    auto lang = mixed_corpus(vocab, 4, 70);
    auto mm = mixed_corpus(vocab, 8, 71);
    lang.erase(std::remove_if(lang.begin(), lang.end(),
                              [](const Sample& s) { return s.kind != SampleKind::language; }),
               lang.end());
    mm.erase(std::remove_if(mm.begin(), mm.end(),
                            [](const Sample& s) { return s.kind != SampleKind::multimodal; }),
             mm.end());
    MixtureConfig cfg{1.0, 3.0, 777};
    auto stream = sample_mixture(cfg, lang, mm, 40000);
    int64_t multimodal = 0;
    for (const auto& s : stream) multimodal += (s.kind == SampleKind::multimodal);
    const double frac = static_cast<double>(multimodal) / 40000.0;
    pass = std::abs(frac - 0.75) < 0.01;
    return "40000 draws at 1:3, multimodal fraction " + fmt(frac, 4) + " (target 0.75 +/- 0.01)";
}

// ---- criterion 7: native-pretrain capability ------------------------------------------------------

std::string criterion_pretrain(bool& pass) {
    const double t0 = now_seconds();
    pass = true;
    std::exception_ptr err_a, err_b;
    // two independent single-threaded training runs, one per core
    std::thread joint_thread([&] {
        try {
            run_pretrain(joint_run_config());
        } catch (...) {
            err_b = std::current_exception();
        }
    });
    try {
        run_pretrain(caption_run_config());
    } catch (...) {
        err_a = std::current_exception();
    }
    joint_thread.join();
    if (err_a) std::rethrow_exception(err_a);
    if (err_b) std::rethrow_exception(err_b);

    PoolAccuracy cap, joint;
    std::exception_ptr eval_err;
    std::thread eval_thread([&] {
        try {
            joint = teacher_forced_accuracy(work("joint.nimm"));
        } catch (...) {
            eval_err = std::current_exception();
        }
    });
    cap = teacher_forced_accuracy(work("caption.nimm"));
    eval_thread.join();
    if (eval_err) std::rethrow_exception(eval_err);

    if (cap.caption < 0.99) pass = false;
    if (joint.text < 0.95 || joint.caption < 0.95) pass = false;
    const double secs = now_seconds() - t0;
    if (secs >= 600.0) pass = false;
    return "2000-step caption overfit acc " + fmt(cap.caption, 4) + " (>=0.99); joint 1:3 text " +
           fmt(joint.text, 4) + " caption " + fmt(joint.caption, 4) + " (both >=0.95), " + fmt(secs, 1) +
           "s (limit 600)";
}

// ---- criterion 8: MPO effect ------------------------------------------------------------------------

std::string criterion_mpo(bool& pass) {
    ensure_joint_checkpoint();
    const double t0 = now_seconds();
    pass = true;

    RunConfig sft = base_run(Stage::sft);
    sft.steps = 2000;
    sft.n_reasoning = 512;
    sft.delta_policy = DeltaPolicy::sample;
    sft.ckpt_in = work("joint.nimm");
    sft.ckpt_out = work("sft.nimm");
    sft.metrics_out = work("sft.metrics.jsonl");
    run_sft(sft);

    RunConfig mpo = base_run(Stage::mpo);
    mpo.steps = 500;
    mpo.batch_size = 2;
    mpo.n_pairs = 256;
    mpo.optimizer.lr = 2e-5;
    mpo.lr_decay = false;
    mpo.delta_policy = DeltaPolicy::fixed;
    mpo.delta_value = 1.0;
    mpo.ckpt_in = work("sft.nimm");
    mpo.ckpt_out = work("mpo.nimm");
    mpo.metrics_out = work("mpo.metrics.jsonl");

    // evaluate the SFT side while the preference run trains
    PostTrainEval before;
    std::exception_ptr eval_err;
    std::thread eval_thread([&] {
        try {
            before = post_train_eval(work("sft.nimm"));
        } catch (...) {
            eval_err = std::current_exception();
        }
    });
    run_mpo(mpo);
    eval_thread.join();
    if (eval_err) std::rethrow_exception(eval_err);
    PostTrainEval after = post_train_eval(work("mpo.nimm"));

    if (!(after.margin > before.margin)) pass = false;
    if (after.reasoning < before.reasoning) pass = false;
    const double secs = now_seconds() - t0;
    if (secs >= 600.0) pass = false;
    return "500 MPO steps on 256 pairs: held-out margin " + fmt(before.margin, 3) + " -> " + fmt(after.margin, 3) +
           " (strictly up); reasoning acc " + fmt(before.reasoning, 3) + " -> " + fmt(after.reasoning, 3) +
           " (no decrease), " + fmt(secs, 1) + "s (limit 600)";
}

// ---- criterion 9: MPO closed forms --------------------------------------------------------------------

std::string criterion_closed_forms(bool& pass) {
    pass = true;
    const double log2 = std::log(2.0);
    if (std::abs(dpo_loss_value(-3.0, -5.0, -3.0, -5.0, 0.1) - log2) > 1e-6) pass = false;
    BcoTerms t = bco_loss_value(-2.0, -9.0, -4.0, -9.0, 0.5, 1.0);  // z_c = 0
    if (std::abs(t.chosen - log2) > 1e-6) pass = false;
    Rng rng(31337);
    double worst = 1e300;
    for (int i = 0; i < 10000; ++i) {
        const double z = (rng.uniform() - 0.5) * 30.0;
        const double lp = z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
        const double lm = z < 0 ? std::log1p(std::exp(z)) : z + std::log1p(std::exp(-z));
        const double both = lp + lm;
        worst = std::min(worst, both);
        if (both < 2 * log2 - 1e-12) pass = false;
    }
    return "zero-margin DPO loss = log 2 and BCO z=0 term = log 2 (+/- 1e-6); min(Lq+ + Lq-) over 1e4 random z = " +
           fmt(worst, 6) + " >= 2 log 2";
}

// ---- criterion 10: PRM / best-of-N -----------------------------------------------------------------------

std::string criterion_prm_bon(bool& pass) {
    const double t0 = now_seconds();
    pass = true;

    RunConfig prm = base_run(Stage::prm);
    prm.steps = 800;
    prm.batch_size = 8;
    prm.n_prm = 32;
    prm.delta_policy = DeltaPolicy::fixed;
    prm.delta_value = 1.0;
    prm.ckpt_out = work("prm.nimm");
    prm.metrics_out = work("prm.metrics.jsonl");
    run_prm(prm);

    Vocab vocab = Vocab::builtin();
    Model critic = load_model(Checkpoint::load(work("prm.nimm")), nullptr, nullptr);
    Rng rng = derive_rng(kDataSeed, "prm");
    GenConfig gc{16, 16, 16};
    std::vector<StepwiseSolution> held_in;
    for (const auto& item : gen_reasoning_task(rng, 32, gc)) {
        held_in.push_back(build_solution(reasoning_prm_record(item), vocab));
        held_in.push_back(build_solution(reasoning_prm_record(corrupt_reasoning(rng, item)), vocab));
    }
    const double acc = slot_accuracy(critic, held_in, {1.0});
    if (acc < 0.95) pass = false;

    // best-of-N with the oracle evaluator as critic; candidate lists are nested
    std::vector<double> bon_acc;
    for (int64_t n : {1, 2, 4, 8}) {
        RunConfig bon = base_run(Stage::bon);
        bon.bon_critic = "oracle";
        bon.bon_n = n;
        bon.bon_questions = 200;
        bon.bon_p_correct = 0.35;
        bon.bon_report = work("bon_n" + std::to_string(n) + ".jsonl");
        bon_acc.push_back(run_bon(bon).accuracy);
    }
    for (size_t i = 1; i < bon_acc.size(); ++i)
        if (bon_acc[i] < bon_acc[i - 1]) pass = false;
    if (bon_acc.back() - bon_acc.front() < 0.05) pass = false;

    const double secs = now_seconds() - t0;
    if (secs >= 600.0) pass = false;
    std::string curve;
    for (double a : bon_acc) curve += (curve.empty() ? "" : " -> ") + fmt(a, 3);
    return "critic slot accuracy " + fmt(acc, 4) + " (>=0.95); oracle-critic BoN accuracy over N in {1,2,4,8}: " +
           curve + " (monotone, N=8 gain " + fmt(bon_acc.back() - bon_acc.front(), 3) + " >= 0.05), " +
           fmt(secs, 1) + "s (limit 600)";
}

// ---- criterion 11: pixel unshuffle --------------------------------------------------------------------------

std::string criterion_unshuffle(bool& pass) {
    pass = true;
    Rng rng(8);
    Tensor big = Tensor::randn({32 * 32, 3}, rng, 1.0);
    Tensor small = pixel_unshuffle(nullptr, big, 32, 32);
    if (small.dim(0) != 256 || small.dim(1) != 12) pass = false;
    Tensor back = pixel_unshuffle_inverse(nullptr, small, 16, 16);
    for (size_t i = 0; i < big.data().size(); ++i)
        if (back.data()[i] != big.data()[i]) pass = false;
    return "32x32 grid: 1024 tokens -> 256 (exact quartering); inverse rearrangement is the identity";
}

// ---- criterion 12: reproducibility ----------------------------------------------------------------------------

std::string criterion_reproducibility(bool& pass) {
    pass = true;
    auto small_cfg = [&](const std::string& tag) {
        RunConfig cfg;
        cfg.stage = Stage::pretrain;
        cfg.seed = 4242;
        cfg.data_seed = 17;
        cfg.steps = 20;
        cfg.batch_size = 4;
        cfg.model = small_model(4242);
        cfg.n_caption = 8;
        cfg.n_count = 8;
        cfg.delta_policy = DeltaPolicy::sample;
        cfg.ckpt_out = work(tag + ".nimm");
        cfg.metrics_out = work(tag + ".metrics.jsonl");
        return cfg;
    };
    // identical (seed, config, data) -> byte-identical artifacts
    run_pretrain(small_cfg("rep_a"));
    run_pretrain(small_cfg("rep_b"));
    const bool same_ckpt = slurp(work("rep_a.nimm")) == slurp(work("rep_b.nimm"));
    const bool same_log = slurp(work("rep_a.metrics.jsonl")) == slurp(work("rep_b.metrics.jsonl"));
    // interrupt at step 7, resume to 20, compare bit for bit
    RunConfig part = small_cfg("rep_part");
    part.steps = 7;
    run_pretrain(part);
    RunConfig rest = small_cfg("rep_rest");
    rest.steps = 20;
    rest.ckpt_in = work("rep_part.nimm");
    run_pretrain(rest);
    const bool resume_ok = slurp(work("rep_a.nimm")) == slurp(work("rep_rest.nimm"));
    const bool log_concat = slurp(work("rep_a.metrics.jsonl")) ==
                            slurp(work("rep_part.metrics.jsonl")) + slurp(work("rep_rest.metrics.jsonl"));
    pass = same_ckpt && same_log && resume_ok && log_concat;
    return std::string("rerun checkpoint ") + (same_ckpt ? "identical" : "DIFFERS") + ", logs " +
           (same_log ? "identical" : "DIFFER") + "; resume@7 checkpoint " +
           (resume_ok ? "bit-equal to the uninterrupted run" : "DIFFERS") + ", concatenated logs " +
           (log_concat ? "match" : "DIFFER");
}

}  // namespace

int main(int argc, char** argv) {
    int only = 0;
    g_work = std::filesystem::temp_directory_path() / "natimm_acceptance";
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
            only = std::atoi(argv[++i]);
        } else if (std::strcmp(argv[i], "--workdir") == 0 && i + 1 < argc) {
            g_work = argv[++i];
        } else {
            std::cerr << "usage: acceptance [--only N] [--workdir PATH]\n";
            return 2;
        }
    }
    std::filesystem::create_directories(g_work);

    const std::vector<Criterion> criteria = {
        {1, "gradient integrity", criterion_gradients},
        {2, "V2PE correctness", criterion_v2pe},
        {3, "masked-loss contract", criterion_masked_loss},
        {4, "weighting-scheme algebra", criterion_weighting},
        {5, "packing equivalence", criterion_packing},
        {6, "mixture ratio", criterion_mixture},
        {7, "native-pretrain capability", criterion_pretrain},
        {8, "MPO effect", criterion_mpo},
        {9, "MPO closed forms", criterion_closed_forms},
        {10, "PRM best-of-N", criterion_prm_bon},
        {11, "pixel unshuffle", criterion_unshuffle},
        {12, "reproducibility", criterion_reproducibility},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        if (only != 0 && c.id != only) continue;
        bool pass = false;
        std::string detail;
        try {
            detail = c.run(pass);
        } catch (const std::exception& e) {
            pass = false;
            detail = std::string("exception: ") + e.what();
        }
        std::cout << "criterion " << (c.id < 10 ? " " : "") << c.id << " " << (pass ? "PASS" : "FAIL") << "  "
                  << c.name << ": " << detail << "\n";
        std::cout.flush();
        if (!pass) ++failures;
    }
    if (failures) std::cout << failures << " criterion(s) FAILED\n";
    return failures;
}
