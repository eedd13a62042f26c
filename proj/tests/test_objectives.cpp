#include <doctest.h>

#include <cmath>

#include "natimm/data.hpp"
#include "natimm/objectives.hpp"
#include "oracle_double.hpp"

using namespace natimm;

namespace {

ModelConfig small_config(uint64_t seed = 3) {
    ModelConfig cfg;
    cfg.vocab_size = 256;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.head_dim = 8;
    cfg.context_window = 256;
    cfg.patch_grid = 4;  // 4 visual tokens
    cfg.projector_hidden = 16;
    cfg.vit_layers = 1;
    cfg.seed = seed;
    return cfg;
}

std::vector<Sample> small_corpus(const Vocab& vocab, int n, uint64_t seed) {
    Rng rng(seed);
    std::vector<Sample> out;
    GenConfig gc{8, 8, 4};
    for (const auto& r : gen_caption_task(rng, (n + 1) / 2, gc)) out.push_back(build_sample(r, vocab, 4));
    for (const auto& r : gen_count_task(rng, n / 2)) out.push_back(build_sample(r, vocab, 4));
    out.resize(static_cast<size_t>(n));
    return out;
}

// long-double logistic loss, an independent high-precision route
long double neg_log_sigmoid(long double z) { return std::log1p(std::exp(-(double)z)); }

}  // namespace

TEST_CASE("token weights per scheme") {
    CHECK(token_weight(WeightingScheme::token_averaging, 4) == 1.0);
    CHECK(token_weight(WeightingScheme::square_averaging, 4) == doctest::Approx(0.5));
    CHECK(token_weight(WeightingScheme::sample_averaging, 4) == doctest::Approx(0.25));
    for (auto s : {WeightingScheme::token_averaging, WeightingScheme::square_averaging,
                   WeightingScheme::sample_averaging})
        CHECK(token_weight(s, 1) == 1.0);
    CHECK_THROWS_AS(token_weight(WeightingScheme::token_averaging, 0), ContractError);
}

TEST_CASE("summed per-sample weights: l, sqrt(l), 1 over l in 1..100") {
    for (int64_t l = 1; l <= 100; ++l) {
        const double token_total = static_cast<double>(l) * token_weight(WeightingScheme::token_averaging, l);
        const double square_total = static_cast<double>(l) * token_weight(WeightingScheme::square_averaging, l);
        const double sample_total = static_cast<double>(l) * token_weight(WeightingScheme::sample_averaging, l);
        CHECK(token_total == static_cast<double>(l));
        CHECK(square_total == doctest::Approx(std::sqrt(static_cast<double>(l))).epsilon(1e-12));
        CHECK(sample_total == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("pretrain_loss on crafted logits: single uniform row gives log V") {
    // two-token language sample; only the second token bears loss
    Sample s;
    s.kind = SampleKind::language;
    s.tokens = {tok::bos, 42};
    s.modality = {Modality::text, Modality::text};
    s.loss_mask = {0, 1};
    PackedBatch b = pack_single(s);
    Tensor logits = Tensor::zeros({2, 64});  // uniform rows
    PretrainLossInfo info;
    Tensor loss = pretrain_loss_on_logits(nullptr, logits, b, WeightingScheme::square_averaging, &info);
    CHECK(loss.item() == doctest::Approx(std::log(64.0)).epsilon(1e-6));
    CHECK(info.loss_tokens == 1);
}

TEST_CASE("an all-visual sample contributes zero loss terms") {
    Vocab vocab = Vocab::builtin();
    ModelConfig cfg = small_config();
    Model model = Model::init(cfg);
    Rng rng(71);
    GenConfig gc{8, 8, 4};
    Sample caption = build_sample(gen_caption_task(rng, 1, gc)[0], vocab, 4);
    // image-only sample: <bos> <img> ctx*4 </img> <eos>, nothing masked
    PretrainRecord rec = gen_caption_task(rng, 1, gc)[0];
    rec.target = "";
    Sample image_only = build_prompt(rec, vocab, 4);
    image_only.tokens.push_back(tok::eos);
    image_only.modality.push_back(Modality::text);
    image_only.loss_mask.push_back(0);

    PretrainLossInfo with_both, caption_alone;
    {
        auto batches = pack({caption, image_only}, cfg.context_window);
        REQUIRE(batches.size() == 1);
        PositionMap pm = batch_positions(batches[0], std::vector<double>(batches[0].images.size(), 1.0));
        pretrain_loss(nullptr, model, batches[0], pm, WeightingScheme::square_averaging, &with_both);
    }
    {
        PackedBatch b = pack_single(caption);
        PositionMap pm = batch_positions(b, std::vector<double>(b.images.size(), 1.0));
        pretrain_loss(nullptr, model, b, pm, WeightingScheme::square_averaging, &caption_alone);
    }
    CHECK(with_both.loss_tokens == caption_alone.loss_tokens);
    CHECK(with_both.weight_total == doctest::Approx(caption_alone.weight_total).epsilon(1e-12));
    CHECK(with_both.weighted_sum == doctest::Approx(caption_alone.weighted_sum).epsilon(1e-6));
}

TEST_CASE("pretrain_loss: degenerate batch (no loss tokens) raises the dedicated error") {
    Sample s;
    s.kind = SampleKind::language;
    s.tokens = {tok::bos, 42};
    s.modality = {Modality::text, Modality::text};
    s.loss_mask = {0, 0};
    PackedBatch b = pack_single(s);
    Tensor logits = Tensor::zeros({2, 64});
    CHECK_THROWS_AS(pretrain_loss_on_logits(nullptr, logits, b, WeightingScheme::square_averaging, nullptr),
                    DegenerateBatchError);
}

TEST_CASE("pretrain_loss matches the double scalar-loop mirror on a random batch") {
    Vocab vocab = Vocab::builtin();
    ModelConfig cfg = small_config();
    Model model = Model::init(cfg);
    auto samples = small_corpus(vocab, 6, 11);
    auto batches = pack(samples, cfg.context_window);
    for (const auto& b : batches) {
        PositionMap pm = batch_positions(b, std::vector<double>(b.images.size(), 0.25));
        for (auto scheme : {WeightingScheme::token_averaging, WeightingScheme::square_averaging,
                            WeightingScheme::sample_averaging}) {
            PretrainLossInfo info;
            Tensor loss = pretrain_loss(nullptr, model, b, pm, scheme, &info);
            const double mirror = oracle::pretrain_loss_mirror(model, b, pm, scheme);
            CHECK(std::abs(loss.item() - mirror) < 1e-4 * (1.0 + std::abs(mirror)));
        }
    }
}

TEST_CASE("zero-gradient property: non-loss logit positions get machine-zero gradients") {
    Vocab vocab = Vocab::builtin();
    ModelConfig cfg = small_config();
    Model model = Model::init(cfg);
    auto samples = small_corpus(vocab, 3, 23);
    auto batches = pack(samples, cfg.context_window);
    const auto& b = batches[0];
    PositionMap pm = batch_positions(b, std::vector<double>(b.images.size(), 1.0));
    Tape tape;
    Tensor logits = model_forward(&tape, model, b, pm);
    Tensor loss = pretrain_loss_on_logits(&tape, logits, b, WeightingScheme::square_averaging, nullptr);
    tape.backward(loss);
    // rows that predict a loss token are exactly the mask-true positions shifted back one
    std::vector<bool> is_loss_row(static_cast<size_t>(b.length()), false);
    for (int64_t i = 1; i < b.length(); ++i)
        if (b.loss_mask[static_cast<size_t>(i)] &&
            b.sample_id[static_cast<size_t>(i)] == b.sample_id[static_cast<size_t>(i - 1)])
            is_loss_row[static_cast<size_t>(i - 1)] = true;
    auto g = logits.grad();
    const int64_t v = logits.dim(1);
    int64_t zero_rows = 0;
    for (int64_t i = 0; i < b.length(); ++i) {
        if (is_loss_row[static_cast<size_t>(i)]) continue;
        ++zero_rows;
        for (int64_t j = 0; j < v; ++j) CHECK(g[static_cast<size_t>(i * v + j)] == 0.0f);
    }
    CHECK(zero_rows > 0);
}

TEST_CASE("gradient flow: vision parameters receive nonzero gradient from a multimodal batch") {
    Vocab vocab = Vocab::builtin();
    ModelConfig cfg = small_config();
    Model model = Model::init(cfg);
    Rng rng(31);
    GenConfig gc{8, 8, 4};
    auto recs = gen_caption_task(rng, 2, gc);
    std::vector<Sample> samples;
    for (const auto& r : recs) samples.push_back(build_sample(r, vocab, 4));
    auto batches = pack(samples, cfg.context_window);
    PositionMap pm = batch_positions(batches[0], std::vector<double>(batches[0].images.size(), 0.5));
    Tape tape;
    Tensor loss = pretrain_loss(&tape, model, batches[0], pm, WeightingScheme::square_averaging);
    tape.backward(loss);
    auto nonzero = [](const Tensor& t) {
        for (float g : t.grad_if_any())
            if (g != 0.0f) return true;
        return false;
    };
    CHECK(nonzero(model.vit.patch_w));
    CHECK(nonzero(model.proj.w1));
    CHECK(nonzero(model.lm.tok_emb));
}

TEST_CASE("all weighting schemes coincide when every sample has l=1") {
    Vocab vocab = Vocab::builtin();
    ModelConfig cfg = small_config();
    Model model = Model::init(cfg);
    // samples with exactly one loss token
    std::vector<Sample> samples;
    for (int k = 0; k < 3; ++k) {
        Sample s;
        s.kind = SampleKind::language;
        s.tokens = {tok::bos, vocab.id("count"), vocab.id(std::to_string(40 + k))};
        s.modality.assign(3, Modality::text);
        s.loss_mask = {0, 0, 1};
        samples.push_back(s);
    }
    auto batches = pack(samples, cfg.context_window);
    PositionMap pm = batch_positions(batches[0], {});
    double vals[3];
    int i = 0;
    for (auto scheme : {WeightingScheme::token_averaging, WeightingScheme::square_averaging,
                        WeightingScheme::sample_averaging})
        vals[i++] = pretrain_loss(nullptr, model, batches[0], pm, scheme).item();
    CHECK(vals[0] == vals[1]);
    CHECK(vals[1] == vals[2]);
}

TEST_CASE("packing equivalence: packed loss equals unpacked losses under the shared normalizer") {
    Vocab vocab = Vocab::builtin();
    ModelConfig cfg = small_config();
    Model model = Model::init(cfg);
    Rng rng(47);
    for (int trial = 0; trial < 20; ++trial) {
        auto samples = small_corpus(vocab, 2 + static_cast<int>(rng.uniform_int(5)), 100 + trial);
        const double delta = kDeltaSet[static_cast<size_t>(rng.uniform_int(9))];
        auto batches = pack(samples, cfg.context_window);
        double packed_weighted_sum = 0.0, total_weight = 0.0;
        for (const auto& b : batches) {
            PositionMap pm = batch_positions(b, std::vector<double>(b.images.size(), delta));
            PretrainLossInfo info;
            pretrain_loss(nullptr, model, b, pm, WeightingScheme::square_averaging, &info);
            packed_weighted_sum += info.weighted_sum;
            total_weight += info.weight_total;
        }
        // unpacked loop: one forward per sample, same global normalizer
        double unpacked_weighted_sum = 0.0;
        for (const auto& s : samples) {
            PackedBatch b = pack_single(s);
            PositionMap pm = batch_positions(b, std::vector<double>(b.images.size(), delta));
            PretrainLossInfo info;
            pretrain_loss(nullptr, model, b, pm, WeightingScheme::square_averaging, &info);
            unpacked_weighted_sum += info.weighted_sum;
        }
        CHECK(std::abs(packed_weighted_sum / total_weight - unpacked_weighted_sum / total_weight) < 1e-5);
    }
}

TEST_CASE("sequence_logprob: uniform head gives -log V per token; empty response gives 0") {
    Vocab vocab = Vocab::builtin();
    ModelConfig cfg = small_config();
    Model model = Model::init(cfg);
    // zero the head so logits are constant rows (a uniform distribution)
    for (auto& x : model.lm.head.data()) x = 0.0f;
    Sample query;
    query.kind = SampleKind::language;
    query.tokens = {tok::bos, vocab.id("count")};
    query.modality.assign(2, Modality::text);
    query.loss_mask.assign(2, 0);
    Tensor lp = sequence_logprob(nullptr, model, query, {vocab.id("7")}, {});
    CHECK(lp.item() == doctest::Approx(-std::log(256.0)).epsilon(1e-6));
    Tensor lp2 = sequence_logprob(nullptr, model, query, {vocab.id("7"), vocab.id("8")}, {});
    CHECK(lp2.item() == doctest::Approx(-2 * std::log(256.0)).epsilon(1e-5));
    Tensor empty = sequence_logprob(nullptr, model, query, {}, {});
    CHECK(empty.item() == 0.0f);
}

TEST_CASE("sequence_logprob matches per-step log-probs accumulated along a greedy rollout") {
    Vocab vocab = Vocab::builtin();
    ModelConfig cfg = small_config();
    Model model = Model::init(cfg);
    Sample prompt;
    prompt.kind = SampleKind::language;
    prompt.tokens = {tok::bos, vocab.id("count"), vocab.id("3"), vocab.id(":")};
    prompt.modality.assign(4, Modality::text);
    prompt.loss_mask.assign(4, 0);

    // decode-trace oracle: accumulate log softmax of each greedy pick
    Sample run = prompt;
    double traced = 0.0;
    std::vector<int> rollout;
    for (int step = 0; step < 5; ++step) {
        PackedBatch b = pack_single(run);
        PositionMap pm = batch_positions(b, {});
        Tensor logits = model_forward(nullptr, model, b, pm);
        const int64_t v = logits.dim(1);
        const float* row = logits.data().data() + static_cast<size_t>((b.length() - 1) * v);
        int arg = 0;
        double mx = row[0];
        for (int64_t j = 1; j < v; ++j)
            if (row[j] > row[arg]) arg = static_cast<int>(j);
        for (int64_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int64_t j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        traced += static_cast<double>(row[arg]) - mx - std::log(denom);
        rollout.push_back(arg);
        run.tokens.push_back(arg);
        run.modality.push_back(Modality::text);
        run.loss_mask.push_back(0);
    }
    Tensor lp = sequence_logprob(nullptr, model, prompt, rollout, {});
    CHECK(lp.item() == doctest::Approx(traced).epsilon(1e-4));
    // and the greedy rollout here matches generate()
    GenerateResult gen = generate(model, prompt, {}, 5, GenMode::greedy);
    if (gen.new_tokens.size() == rollout.size()) CHECK(gen.new_tokens == rollout);
}

TEST_CASE("dpo closed forms and monotonicity") {
    // zero margin: policy equals reference
    CHECK(dpo_loss_value(-5.0, -7.0, -5.0, -7.0, 0.1) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    // beta 0.5, chosen log-ratio 2, rejected -2 -> -log sigmoid(2)
    const double expect = static_cast<double>(neg_log_sigmoid(2.0L));
    CHECK(dpo_loss_value(-3.0, -9.0, -5.0, -7.0, 0.5) == doctest::Approx(expect).epsilon(1e-9));
    // monotone decreasing in the margin
    double prev = 1e9;
    for (double m : {-20.0, -2.0, 0.0, 2.0, 20.0}) {
        const double loss = dpo_loss_value(m, 0.0, 0.0, 0.0, 1.0);
        CHECK(loss < prev);
        prev = loss;
    }
    CHECK(dpo_loss_value(40.0, 0.0, 0.0, 0.0, 1.0) < 1e-10);
    CHECK(dpo_loss_value(-40.0, 0.0, 0.0, 0.0, 1.0) > 30.0);
    CHECK_THROWS_AS(dpo_loss_value(std::nan(""), 0, 0, 0, 0.1), NumericError);
}

TEST_CASE("dpo is invariant to a shared constant added to policy and reference log-probs") {
    const double base = dpo_loss_value(-3.0, -4.5, -3.5, -4.0, 0.2);
    for (double c : {0.5, -2.0, 10.0}) {
        const double shifted = dpo_loss_value(-3.0 + c, -4.5 + c, -3.5 + c, -4.0 + c, 0.2);
        CHECK(shifted == doctest::Approx(base).epsilon(1e-9));
    }
}

TEST_CASE("bco closed forms, lower bound, and scalar-oracle agreement") {
    // z_c = 0: reward equals shift
    BcoTerms t0 = bco_loss_value(-2.0, -9.0, -4.0, -9.0, 0.5, 1.0);
    CHECK(t0.chosen == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    Rng rng(77);
    for (int i = 0; i < 10000; ++i) {
        const double z = (rng.uniform() - 0.5) * 20.0;
        const double lower = 2.0 * std::log(2.0);
        const double both = static_cast<double>(neg_log_sigmoid(z) + neg_log_sigmoid(-z));
        CHECK(both >= lower - 1e-12);
        // random pairs match the long-double oracle
        const double lp_c = -rng.uniform() * 10, lp_r = -rng.uniform() * 10;
        const double rl_c = -rng.uniform() * 10, rl_r = -rng.uniform() * 10;
        const double beta = 0.1 + rng.uniform();
        const double shift = (rng.uniform() - 0.5) * 4;
        BcoTerms t = bco_loss_value(lp_c, lp_r, rl_c, rl_r, beta, shift);
        const double zc = beta * (lp_c - rl_c) - shift;
        const double zr = beta * (lp_r - rl_r) - shift;
        CHECK(t.chosen == doctest::Approx(static_cast<double>(neg_log_sigmoid(zc))).epsilon(1e-10));
        CHECK(t.rejected == doctest::Approx(static_cast<double>(neg_log_sigmoid(-zr))).epsilon(1e-10));
    }
}

TEST_CASE("reward shift: first update, geometric approach, long-stream oracle") {
    RewardShift s;
    CHECK(s.update(1.0) == doctest::Approx(0.1).epsilon(1e-12));
    RewardShift s2;
    for (int i = 0; i < 200; ++i) s2.update(3.0);
    CHECK(s2.value == doctest::Approx(3.0).epsilon(1e-8));
    // 1000-step random stream vs scalar EMA oracle
    RewardShift s3;
    double oracle_value = 0.0;
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        const double r = rng.normal();
        s3.update(r);
        oracle_value = 0.9 * oracle_value + 0.1 * r;
        CHECK(s3.value == doctest::Approx(oracle_value).epsilon(1e-12));
    }
}

namespace {

PreferencePair small_pair(const Vocab& vocab, uint64_t seed) {
    Rng rng(seed);
    GenConfig gc{8, 8, 4};
    auto items = gen_reasoning_task(rng, 1, gc);
    return build_preference_pair(reasoning_preference_record(rng, items[0]), vocab, 4);
}

}  // namespace

TEST_CASE("mpo: degenerate weights reduce to dpo and to the generation loss") {
    Vocab vocab = Vocab::builtin();
    ModelConfig cfg = small_config();
    Model policy = Model::init(cfg);
    Model reference = policy.clone();
    PreferencePair pair = small_pair(vocab, 3);

    MPOConfig only_p;
    only_p.w_p = 1.0;
    only_p.w_q = 0.0;
    only_p.w_g = 0.0;
    MpoTerms terms;
    Tensor loss = mpo_loss(nullptr, only_p, pair, policy, reference, {1.0}, 0.0, &terms);
    // policy == reference at start: exactly the zero-margin dpo value
    CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    CHECK(terms.preference == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    MPOConfig only_g;
    only_g.w_p = 0.0;
    only_g.w_q = 0.0;
    only_g.w_g = 1.0;
    Tensor loss_g = mpo_loss(nullptr, only_g, pair, policy, reference, {1.0}, 0.0, &terms);
    // equals the autoregressive loss on the chosen response
    Sample chosen = pair.query;
    for (int id : pair.chosen) {
        chosen.tokens.push_back(id);
        chosen.modality.push_back(Modality::text);
        chosen.loss_mask.push_back(1);
    }
    PackedBatch b = pack_single(chosen);
    PositionMap pm = batch_positions(b, {1.0});
    Tensor direct = pretrain_loss(nullptr, policy, b, pm, WeightingScheme::square_averaging);
    CHECK(loss_g.item() == doctest::Approx(direct.item()).epsilon(1e-7));
}

TEST_CASE("mpo is linear in its term weights") {
    Vocab vocab = Vocab::builtin();
    ModelConfig cfg = small_config();
    Model policy = Model::init(cfg);
    Model reference = Model::init(small_config(99));  // distinct reference -> nonzero margins
    PreferencePair pair = small_pair(vocab, 9);

    MPOConfig w1;
    w1.w_p = 0.5;
    w1.w_q = 0.25;
    w1.w_g = 1.0;
    MPOConfig w2 = w1;
    w2.w_p *= 2;
    w2.w_q *= 2;
    w2.w_g *= 2;

    Tape t1;
    Tensor l1 = mpo_loss(&t1, w1, pair, policy, reference, {1.0}, 0.1, nullptr);
    t1.backward(l1);
    const float g1 = policy.lm.head.grad()[0];
    const double v1 = l1.item();
    policy.zero_grad();
    Tape t2;
    Tensor l2 = mpo_loss(&t2, w2, pair, policy, reference, {1.0}, 0.1, nullptr);
    t2.backward(l2);
    const float g2 = policy.lm.head.grad()[0];
    CHECK(l2.item() == doctest::Approx(2.0 * v1).epsilon(1e-6));
    CHECK(g2 == doctest::Approx(2.0f * g1).epsilon(1e-5));
}

TEST_CASE("one mpo step on a single pair strictly increases its margin") {
    Vocab vocab = Vocab::builtin();
    ModelConfig cfg = small_config();
    Model policy = Model::init(cfg);
    Model reference = policy.clone();
    PreferencePair pair = small_pair(vocab, 21);
    MPOConfig mcfg;  // defaults
    MpoTerms before;
    {
        Tape tape;
        Tensor loss = mpo_loss(&tape, mcfg, pair, policy, reference, {1.0}, 0.0, &before);
        tape.backward(loss);
    }
    OptimizerConfig oc;
    oc.kind = OptKind::sgd;
    oc.lr = 1e-2;
    OptimizerState opt = make_optimizer(oc, policy.params());
    REQUIRE(optimizer_step(opt, policy.params()));
    policy.zero_grad();
    MpoTerms after;
    mpo_loss(nullptr, mcfg, pair, policy, reference, {1.0}, 0.0, &after);
    CHECK(after.margin > before.margin);
}
