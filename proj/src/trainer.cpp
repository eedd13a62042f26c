#include "natimm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

namespace natimm {

using nlohmann::json;

Stage parse_stage(const std::string& name) {
    if (name == "pretrain") return Stage::pretrain;
    if (name == "sft") return Stage::sft;
    if (name == "mpo") return Stage::mpo;
    if (name == "prm") return Stage::prm;
    if (name == "bon") return Stage::bon;
    if (name == "eval") return Stage::eval;
    throw ConfigError("unknown stage \"" + name + "\"");
}

std::string stage_str(Stage s) {
    switch (s) {
        case Stage::pretrain: return "pretrain";
        case Stage::sft: return "sft";
        case Stage::mpo: return "mpo";
        case Stage::prm: return "prm";
        case Stage::bon: return "bon";
        case Stage::eval: return "eval";
    }
    return "?";
}

void RunConfig::validate() const {
    if (!seed) throw ConfigError("seed is mandatory (set it in the config file or pass --seed)");
    model.validate();
    mpo.validate();
    if (steps < 0 || batch_size <= 0) throw ConfigError("steps must be >= 0 and batch_size positive");
    if (data_source != "synthetic" && data_source != "jsonl")
        throw ConfigError("data.source must be synthetic or jsonl");
    if (data_source == "jsonl" && data_path.empty() &&
        (stage == Stage::pretrain || stage == Stage::sft || stage == Stage::mpo || stage == Stage::prm))
        throw ConfigError("data.source = jsonl requires data.path");
    if (delta_policy == DeltaPolicy::fixed && !is_valid_delta(delta_value))
        throw ConfigError("fixed delta is not in the admissible set");
    if ((stage == Stage::pretrain || stage == Stage::sft || stage == Stage::mpo || stage == Stage::prm) &&
        (delta_policy == DeltaPolicy::automatic || delta_policy == DeltaPolicy::sweep))
        throw ConfigError("training stages accept delta policy sample or fixed only");
    if (stage != Stage::pretrain && stage != Stage::prm && ckpt_in.empty() && stage != Stage::bon)
        throw ConfigError(stage_str(stage) + " requires --ckpt (an input checkpoint)");
    if (bon_critic != "model" && bon_critic != "oracle") throw ConfigError("bon.critic must be model or oracle");
    if (stage == Stage::bon && bon_critic == "model" && ckpt_in.empty())
        throw ConfigError("bon with a model critic requires --ckpt");
    if (bon_p_correct < 0.0 || bon_p_correct > 1.0) throw ConfigError("bon.p_correct must lie in [0,1]");
}

// ---- config file ------------------------------------------------------------------

namespace {

int64_t parse_i64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        int64_t x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": expected an integer, got \"" + v + "\"");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        uint64_t x = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": expected an unsigned integer, got \"" + v + "\"");
    }
}

double parse_f64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": expected a number, got \"" + v + "\"");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key " + key + ": expected true/false, got \"" + v + "\"");
}

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

}  // namespace

void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "stage") cfg.stage = parse_stage(value);
    else if (key == "seed") cfg.seed = parse_u64(key, value);
    else if (key == "steps") cfg.steps = parse_i64(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_i64(key, value);
    else if (key == "weighting") cfg.weighting = parse_weighting(value);
    else if (key == "force_stage") cfg.force_stage = parse_bool(key, value);
    else if (key == "model.vocab_size") cfg.model.vocab_size = parse_i64(key, value);
    else if (key == "model.d_model") cfg.model.d_model = parse_i64(key, value);
    else if (key == "model.n_layers") cfg.model.n_layers = parse_i64(key, value);
    else if (key == "model.n_heads") cfg.model.n_heads = parse_i64(key, value);
    else if (key == "model.head_dim") cfg.model.head_dim = parse_i64(key, value);
    else if (key == "model.context_window") cfg.model.context_window = parse_i64(key, value);
    else if (key == "model.patch_grid") cfg.model.patch_grid = parse_i64(key, value);
    else if (key == "model.projector_hidden") cfg.model.projector_hidden = parse_i64(key, value);
    else if (key == "model.vit_layers") cfg.model.vit_layers = parse_i64(key, value);
    else if (key == "model.cells_per_patch") cfg.model.cells_per_patch = parse_i64(key, value);
    else if (key == "mixture.language_weight") cfg.mixture.language_weight = parse_f64(key, value);
    else if (key == "mixture.multimodal_weight") cfg.mixture.multimodal_weight = parse_f64(key, value);
    else if (key == "mpo.w_p") cfg.mpo.w_p = parse_f64(key, value);
    else if (key == "mpo.w_q") cfg.mpo.w_q = parse_f64(key, value);
    else if (key == "mpo.w_g") cfg.mpo.w_g = parse_f64(key, value);
    else if (key == "mpo.beta") cfg.mpo.beta = parse_f64(key, value);
    else if (key == "mpo.shift_decay") cfg.mpo.shift_decay = parse_f64(key, value);
    else if (key == "optimizer.kind") {
        if (value == "adam") cfg.optimizer.kind = OptKind::adam;
        else if (value == "sgd") cfg.optimizer.kind = OptKind::sgd;
        else throw ConfigError("optimizer.kind must be adam or sgd");
    } else if (key == "optimizer.lr") cfg.optimizer.lr = parse_f64(key, value);
    else if (key == "optimizer.lr_decay") cfg.lr_decay = parse_bool(key, value);
    else if (key == "pack_window") cfg.pack_window = parse_i64(key, value);
    else if (key == "optimizer.beta1") cfg.optimizer.beta1 = parse_f64(key, value);
    else if (key == "optimizer.beta2") cfg.optimizer.beta2 = parse_f64(key, value);
    else if (key == "optimizer.eps") cfg.optimizer.eps = parse_f64(key, value);
    else if (key == "optimizer.weight_decay") cfg.optimizer.weight_decay = parse_f64(key, value);
    else if (key == "delta.policy") {
        if (value == "sample") cfg.delta_policy = DeltaPolicy::sample;
        else if (value == "fixed") cfg.delta_policy = DeltaPolicy::fixed;
        else if (value == "auto") cfg.delta_policy = DeltaPolicy::automatic;
        else if (value == "sweep") cfg.delta_policy = DeltaPolicy::sweep;
        else throw ConfigError("delta.policy must be sample|fixed|auto|sweep");
    } else if (key == "delta.value") cfg.delta_value = parse_delta(value);
    else if (key == "data.source") cfg.data_source = value;
    else if (key == "data.path") cfg.data_path = value;
    else if (key == "data.vocab") cfg.vocab_path = value;
    else if (key == "data.seed") cfg.data_seed = parse_u64(key, value);
    else if (key == "data.n_caption") cfg.n_caption = parse_i64(key, value);
    else if (key == "data.n_count") cfg.n_count = parse_i64(key, value);
    else if (key == "data.n_reasoning") cfg.n_reasoning = parse_i64(key, value);
    else if (key == "data.n_pairs") cfg.n_pairs = parse_i64(key, value);
    else if (key == "data.n_prm") cfg.n_prm = parse_i64(key, value);
    else if (key == "paths.ckpt_in") cfg.ckpt_in = value;
    else if (key == "paths.ckpt_out") cfg.ckpt_out = value;
    else if (key == "paths.metrics") cfg.metrics_out = value;
    else if (key == "eval.n") cfg.eval_n = parse_i64(key, value);
    else if (key == "eval.pairs") cfg.eval_pairs = parse_i64(key, value);
    else if (key == "eval.max_new") cfg.max_new = parse_i64(key, value);
    else if (key == "bon.n") cfg.bon_n = parse_i64(key, value);
    else if (key == "bon.questions") cfg.bon_questions = parse_i64(key, value);
    else if (key == "bon.p_correct") cfg.bon_p_correct = parse_f64(key, value);
    else if (key == "bon.critic") cfg.bon_critic = value;
    else if (key == "bon.report") cfg.bon_report = value;
    else throw ConfigError("unknown config key \"" + key + "\"");
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    RunConfig cfg;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            apply_config_kv(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

// ---- checkpoint glue -----------------------------------------------------------------

namespace {

json model_config_json(const ModelConfig& m) {
    return json{{"vocab_size", m.vocab_size},
                {"d_model", m.d_model},
                {"n_layers", m.n_layers},
                {"n_heads", m.n_heads},
                {"head_dim", m.head_dim},
                {"context_window", m.context_window},
                {"patch_grid", m.patch_grid},
                {"projector_hidden", m.projector_hidden},
                {"vit_layers", m.vit_layers},
                {"cells_per_patch", m.cells_per_patch},
                {"seed", m.seed}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig m;
    m.vocab_size = j.at("vocab_size").get<int64_t>();
    m.d_model = j.at("d_model").get<int64_t>();
    m.n_layers = j.at("n_layers").get<int64_t>();
    m.n_heads = j.at("n_heads").get<int64_t>();
    m.head_dim = j.at("head_dim").get<int64_t>();
    m.context_window = j.at("context_window").get<int64_t>();
    m.patch_grid = j.at("patch_grid").get<int64_t>();
    m.projector_hidden = j.at("projector_hidden").get<int64_t>();
    m.vit_layers = j.at("vit_layers").get<int64_t>();
    m.cells_per_patch = j.at("cells_per_patch").get<int64_t>();
    m.seed = j.at("seed").get<uint64_t>();
    return m;
}

}  // namespace

Checkpoint make_checkpoint(const Model& model, const OptimizerState* opt, const TrainState& state) {
    Checkpoint ck;
    json blob{{"format", 1},
              {"stage", stage_str(state.stage)},
              {"step", state.step},
              {"seed", state.seed},
              {"reward_shift", state.reward_shift},
              {"rng", state.rng_state},
              {"model", model_config_json(model.cfg)}};
    if (opt) {
        blob["optimizer"] = json{{"kind", opt->cfg.kind == OptKind::adam ? "adam" : "sgd"},
                                 {"lr", opt->cfg.lr},
                                 {"beta1", opt->cfg.beta1},
                                 {"beta2", opt->cfg.beta2},
                                 {"eps", opt->cfg.eps},
                                 {"weight_decay", opt->cfg.weight_decay},
                                 {"step", opt->step}};
    }
    ck.config_blob = blob.dump();
    for (const auto& [name, t] : model.named_params()) ck.add(name, t);
    if (opt && opt->cfg.kind == OptKind::adam) {
        const auto named = model.named_params();
        for (size_t i = 0; i < named.size(); ++i) {
            ck.add("opt.m." + named[i].first, opt->m[i]);
            ck.add("opt.v." + named[i].first, opt->v[i]);
        }
    }
    return ck;
}

Model load_model(const Checkpoint& ck, OptimizerState* opt, TrainState* state) {
    json blob;
    try {
        blob = json::parse(ck.config_blob);
    } catch (const std::exception& e) {
        throw FormatError(std::string("checkpoint config blob is not valid JSON: ") + e.what());
    }
    Model model = Model::init(model_config_from_json(blob.at("model")));
    for (auto& [name, t] : model.named_params()) {
        const Tensor* src = ck.find(name);
        if (!src) throw FormatError("checkpoint is missing tensor \"" + name + "\"");
        if (src->shape() != t.shape())
            throw FormatError("checkpoint tensor \"" + name + "\" has shape " + shape_str(src->shape()) +
                              ", model expects " + shape_str(t.shape()));
        std::copy_n(src->data().data(), src->data().size(), t.data().data());
    }
    if (state) {
        state->stage = parse_stage(blob.at("stage").get<std::string>());
        state->step = blob.at("step").get<int64_t>();
        state->seed = blob.at("seed").get<uint64_t>();
        state->reward_shift = blob.at("reward_shift").get<double>();
        state->rng_state = blob.at("rng").get<std::string>();
    }
    if (opt) {
        if (!blob.contains("optimizer")) throw FormatError("checkpoint has no optimizer state to resume from");
        const json& oj = blob["optimizer"];
        OptimizerConfig oc;
        oc.kind = oj.at("kind").get<std::string>() == "adam" ? OptKind::adam : OptKind::sgd;
        oc.lr = oj.at("lr").get<double>();
        oc.beta1 = oj.at("beta1").get<double>();
        oc.beta2 = oj.at("beta2").get<double>();
        oc.eps = oj.at("eps").get<double>();
        oc.weight_decay = oj.at("weight_decay").get<double>();
        *opt = make_optimizer(oc, model.params());
        opt->step = oj.at("step").get<int64_t>();
        if (oc.kind == OptKind::adam) {
            const auto named = model.named_params();
            for (size_t i = 0; i < named.size(); ++i) {
                const Tensor* m = ck.find("opt.m." + named[i].first);
                const Tensor* v = ck.find("opt.v." + named[i].first);
                if (!m || !v) throw FormatError("checkpoint is missing optimizer moments for " + named[i].first);
                std::copy_n(m->data().data(), m->data().size(), opt->m[i].data().data());
                std::copy_n(v->data().data(), v->data().size(), opt->v[i].data().data());
            }
        }
    }
    return model;
}

// ---- pools & helpers ---------------------------------------------------------------------

Vocab load_vocab(const RunConfig& cfg) {
    return cfg.vocab_path.empty() ? Vocab::builtin() : Vocab::load(cfg.vocab_path);
}

namespace {

GenConfig gen_config(const ModelConfig& m) {
    GenConfig g;
    g.img_h = static_cast<int>(m.image_cells());
    g.img_w = static_cast<int>(m.image_cells());
    g.n_visual = static_cast<int>(m.n_visual_tokens());
    return g;
}

std::vector<Sample> records_to_samples(const std::vector<PretrainRecord>& recs, const Vocab& vocab, int n_visual) {
    std::vector<Sample> out;
    out.reserve(recs.size());
    for (const auto& r : recs) out.push_back(build_sample(r, vocab, n_visual));
    return out;
}

StepwiseSolution solution_from_item(const ReasoningItem& item, const Vocab& vocab) {
    StepwiseSolution sol;
    sol.image = item.image;
    sol.question = vocab.encode(item.question);
    for (const auto& s : item.steps) sol.steps.push_back(vocab.encode(s));
    sol.answer = item.answer;
    return sol;
}

void ensure_parent_dir(const std::string& path) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
}

}  // namespace

StagePools stage_pools(const RunConfig& cfg, const Vocab& vocab) {
    const int n_visual = static_cast<int>(cfg.model.n_visual_tokens());
    const GenConfig gc = gen_config(cfg.model);
    StagePools pools;
    if (cfg.data_source == "jsonl" && (cfg.stage == Stage::pretrain || cfg.stage == Stage::sft)) {
        for (const auto& rec : ingest_pretrain_jsonl(cfg.data_path)) {
            Sample s = build_sample(rec, vocab, n_visual);
            (rec.kind == SampleKind::language ? pools.language : pools.multimodal).push_back(std::move(s));
        }
        return pools;
    }
    if (cfg.data_source == "jsonl" && cfg.stage == Stage::prm) {
        for (const auto& rec : ingest_prm_jsonl(cfg.data_path)) {
            StepwiseSolution sol = build_solution(rec, vocab);
            pools.multimodal.push_back(format_multiturn(sol, n_visual).sample);
        }
        return pools;
    }
    switch (cfg.stage) {
        case Stage::pretrain: {
            Rng crng = derive_rng(cfg.data_seed, "caption");
            pools.multimodal = records_to_samples(gen_caption_task(crng, static_cast<int>(cfg.n_caption), gc),
                                                  vocab, n_visual);
            Rng trng = derive_rng(cfg.data_seed, "count");
            pools.language = records_to_samples(gen_count_task(trng, static_cast<int>(cfg.n_count)), vocab, n_visual);
            break;
        }
        case Stage::sft: {
            Rng rrng = derive_rng(cfg.data_seed, "reasoning");
            for (const auto& item : gen_reasoning_task(rrng, static_cast<int>(cfg.n_reasoning), gc))
                pools.multimodal.push_back(build_sample(reasoning_sft_record(item), vocab, n_visual));
            Rng crng = derive_rng(cfg.data_seed, "caption");
            for (auto& s :
                 records_to_samples(gen_caption_task(crng, static_cast<int>(cfg.n_caption), gc), vocab, n_visual))
                pools.multimodal.push_back(std::move(s));
            Rng trng = derive_rng(cfg.data_seed, "count");
            pools.language = records_to_samples(gen_count_task(trng, static_cast<int>(cfg.n_count)), vocab, n_visual);
            break;
        }
        case Stage::prm: {
            Rng rng = derive_rng(cfg.data_seed, "prm");
            for (const auto& item : gen_reasoning_task(rng, static_cast<int>(cfg.n_prm), gc)) {
                StepwiseSolution gold = build_solution(reasoning_prm_record(item), vocab);
                pools.multimodal.push_back(format_multiturn(gold, n_visual).sample);
                ReasoningItem bad = corrupt_reasoning(rng, item);
                StepwiseSolution corrupted = build_solution(reasoning_prm_record(bad), vocab);
                pools.multimodal.push_back(format_multiturn(corrupted, n_visual).sample);
            }
            break;
        }
        default:
            throw ContractError("stage_pools: not a corpus-training stage");
    }
    return pools;
}

std::vector<PreferencePair> heldout_pairs(const RunConfig& cfg, const Vocab& vocab, int64_t n) {
    const int n_visual = static_cast<int>(cfg.model.n_visual_tokens());
    Rng rng = derive_rng(cfg.data_seed, "pairs-heldout");
    std::vector<PreferencePair> out;
    for (const auto& item : gen_reasoning_task(rng, static_cast<int>(n), gen_config(cfg.model)))
        out.push_back(build_preference_pair(reasoning_preference_record(rng, item), vocab, n_visual));
    return out;
}

double mean_margin(const Model& model, const std::vector<PreferencePair>& pairs,
                   const std::vector<double>& delta_for_images) {
    if (pairs.empty()) throw ContractError("mean_margin: no pairs");
    double total = 0.0;
    for (const auto& pair : pairs) {
        std::vector<double> deltas(pair.query.images.size(),
                                   delta_for_images.empty() ? 1.0 : delta_for_images[0]);
        const double lp_c = sequence_logprob(nullptr, model, pair.query, pair.chosen, deltas).item();
        const double lp_r = sequence_logprob(nullptr, model, pair.query, pair.rejected, deltas).item();
        total += lp_c - lp_r;
    }
    return total / static_cast<double>(pairs.size());
}

namespace {

std::optional<int> parse_generated_answer(const Vocab& vocab, const std::vector<int>& new_tokens) {
    std::optional<int> answer;
    for (size_t i = 0; i + 1 < new_tokens.size(); ++i) {
        if (vocab.token(new_tokens[i]) == "answer") {
            try {
                answer = std::stoi(vocab.token(new_tokens[i + 1]));
            } catch (const std::exception&) {
            }
        }
    }
    return answer;
}

}  // namespace

double reasoning_accuracy(const Model& model, const Vocab& vocab, const std::vector<ReasoningItem>& items,
                          int64_t max_new) {
    if (items.empty()) return 0.0;
    const int n_visual = static_cast<int>(model.cfg.n_visual_tokens());
    int64_t correct = 0;
    for (const auto& item : items) {
        Sample prompt = build_prompt(reasoning_sft_record(item), vocab, n_visual);
        GenerateResult gen = generate(model, prompt, {1.0}, static_cast<int>(max_new), GenMode::greedy);
        auto answer = parse_generated_answer(vocab, gen.new_tokens);
        if (answer && *answer == item.answer) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(items.size());
}

// ---- training loops -----------------------------------------------------------------------

namespace {

struct MetricsLog {
    std::ofstream file;
    bool enabled = false;

    explicit MetricsLog(const std::string& path) {
        if (path.empty()) return;
        ensure_parent_dir(path);
        file.open(path, std::ios::trunc);
        if (!file) throw DataError("cannot write metrics log: " + path);
        enabled = true;
    }

    void line(const json& j) {
        if (enabled) file << j.dump() << "\n";
    }
};

std::vector<double> deltas_for_batch(const RunConfig& cfg, Rng& step_rng, const PackedBatch& batch) {
    if (cfg.delta_policy == DeltaPolicy::fixed)
        return std::vector<double>(batch.images.size(), cfg.delta_value);
    return sample_delta(step_rng, static_cast<int>(batch.images.size()));
}

void check_stage_provenance(const RunConfig& cfg, const TrainState& in_state, Stage required_or_self) {
    if (cfg.force_stage) return;
    if (in_state.stage == required_or_self || in_state.stage == cfg.stage) return;
    throw ConfigError("checkpoint provenance is \"" + stage_str(in_state.stage) + "\" but stage " +
                      stage_str(cfg.stage) + " expects \"" + stage_str(required_or_self) +
                      "\" (use force_stage = true to override)");
}

RunSummary corpus_training_run(const RunConfig& cfg) {
    cfg.validate();
    const Vocab vocab = load_vocab(cfg);
    const uint64_t seed = *cfg.seed;

    Model model = Model::init([&] {
        ModelConfig m = cfg.model;
        m.seed = seed;
        return m;
    }());
    OptimizerState opt = make_optimizer(cfg.optimizer, model.params());
    TrainState state;
    state.stage = cfg.stage;
    state.seed = seed;

    if (!cfg.ckpt_in.empty()) {
        Checkpoint ck = Checkpoint::load(cfg.ckpt_in);
        TrainState in_state;
        Model loaded = load_model(ck, nullptr, &in_state);
        const Stage required = cfg.stage == Stage::sft ? Stage::pretrain : cfg.stage;
        check_stage_provenance(cfg, in_state, required);
        const bool resuming = in_state.stage == cfg.stage;
        if (resuming) {
            model = load_model(ck, &opt, &in_state);
            state.step = in_state.step;
        } else {
            model = std::move(loaded);  // fresh optimizer, fresh step counter
            opt = make_optimizer(cfg.optimizer, model.params());
        }
    } else if (cfg.stage == Stage::sft) {
        throw ConfigError("sft requires a pretrain checkpoint");
    }

    if (vocab.size() > model.cfg.vocab_size)
        throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " entries but model.vocab_size is " +
                          std::to_string(model.cfg.vocab_size));
    RunConfig ecfg = cfg;  // pool geometry follows the model actually trained
    ecfg.model = model.cfg;
    StagePools pools = stage_pools(ecfg, vocab);
    MixtureConfig mix = cfg.mixture;
    if (cfg.stage == Stage::prm) {
        mix.language_weight = 0.0;  // PRM corpora are multimodal multiturn samples only
        mix.multimodal_weight = 1.0;
    }
    if (mix.language_weight > 0 && pools.language.empty())
        throw ConfigError("stage " + stage_str(cfg.stage) + ": language pool is empty");
    if (mix.multimodal_weight > 0 && pools.multimodal.empty())
        throw ConfigError("stage " + stage_str(cfg.stage) + ": multimodal pool is empty");

    MetricsLog metrics(cfg.metrics_out);
    RunSummary summary;
    summary.stage = cfg.stage;

    for (int64_t step = state.step; step < cfg.steps; ++step) {
        MixtureConfig step_mix = mix;
        step_mix.seed = derive_rng(seed, "mix", static_cast<uint64_t>(step)).next_u64();
        std::vector<Sample> drawn =
            sample_mixture(step_mix, pools.language, pools.multimodal, cfg.batch_size);
        const int64_t capacity = cfg.pack_window > 0 ? std::min(cfg.pack_window, model.cfg.context_window)
                                                     : model.cfg.context_window;
        std::vector<PackedBatch> batches = pack(drawn, capacity);
        Rng delta_rng = derive_rng(seed, "delta", static_cast<uint64_t>(step));

        double weight_total = 0.0;
        for (const auto& b : batches) weight_total += batch_weight_total(b, cfg.weighting);
        json line{{"step", step}, {"stage", stage_str(cfg.stage)}};
        if (weight_total == 0.0) {
            std::cerr << "warning: step " << step << " carries no loss-bearing tokens; batch skipped\n";
            line["skipped"] = true;
            line["reason"] = "degenerate batch";
            metrics.line(line);
            ++summary.skipped_steps;
            continue;
        }

        Tape tape;
        ImageCache image_cache;  // one optimizer step: weights fixed across packs
        double weighted_sum = 0.0;
        int64_t loss_tokens = 0, correct = 0;
        Tensor total_loss;
        for (const auto& batch : batches) {
            std::vector<double> deltas = deltas_for_batch(cfg, delta_rng, batch);
            PositionMap pm = batch_positions(batch, deltas);
            PretrainLossInfo info;
            Tensor logits = model_forward(&tape, model, batch, pm, &image_cache);
            Tensor loss = pretrain_loss_on_logits(&tape, logits, batch, cfg.weighting, &info);
            // Re-normalize to the step-global weight total.
            Tensor scaled = scale(&tape, loss, info.weight_total / weight_total);
            total_loss = total_loss.defined() ? add(&tape, total_loss, scaled) : scaled;
            weighted_sum += info.weighted_sum;
            loss_tokens += info.loss_tokens;
            correct += info.correct;
        }
        tape.backward(total_loss);
        tape.clear();
        const double step_loss = weighted_sum / weight_total;
        if (!std::isfinite(step_loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
        if (cfg.lr_decay)
            opt.cfg.lr = cfg.optimizer.lr *
                         (1.0 - static_cast<double>(step) / static_cast<double>(std::max<int64_t>(cfg.steps, 1)));
        const bool applied = optimizer_step(opt, model.params());
        model.zero_grad();
        if (!applied) {
            std::cerr << "warning: non-finite gradient at step " << step << "; update skipped\n";
            ++summary.skipped_steps;
        }
        line["loss"] = step_loss;
        line["acc"] = loss_tokens ? static_cast<double>(correct) / static_cast<double>(loss_tokens) : 0.0;
        line["loss_tokens"] = loss_tokens;
        line["weight_total"] = weight_total;
        line["skipped"] = !applied;
        metrics.line(line);
        summary.final_loss = step_loss;
        ++summary.steps_run;
        state.step = step + 1;
    }

    state.rng_state = derive_rng(seed, "run", static_cast<uint64_t>(state.step)).serialize();
    if (!cfg.ckpt_out.empty()) {
        ensure_parent_dir(cfg.ckpt_out);
        make_checkpoint(model, &opt, state).save(cfg.ckpt_out);
    }
    summary.ckpt_out = cfg.ckpt_out;
    summary.metrics_out = cfg.metrics_out;
    return summary;
}

}  // namespace

RunSummary run_pretrain(const RunConfig& cfg) {
    if (cfg.stage != Stage::pretrain) throw ContractError("run_pretrain called with wrong stage");
    return corpus_training_run(cfg);
}

RunSummary run_sft(const RunConfig& cfg) {
    if (cfg.stage != Stage::sft) throw ContractError("run_sft called with wrong stage");
    return corpus_training_run(cfg);
}

RunSummary run_prm(const RunConfig& cfg) {
    if (cfg.stage != Stage::prm) throw ContractError("run_prm called with wrong stage");
    return corpus_training_run(cfg);
}

RunSummary run_mpo(const RunConfig& cfg) {
    if (cfg.stage != Stage::mpo) throw ContractError("run_mpo called with wrong stage");
    cfg.validate();
    const Vocab vocab = load_vocab(cfg);
    const uint64_t seed = *cfg.seed;

    Checkpoint ck = Checkpoint::load(cfg.ckpt_in);
    TrainState in_state;
    Model policy = load_model(ck, nullptr, &in_state);
    check_stage_provenance(cfg, in_state, Stage::sft);
    const int n_visual = static_cast<int>(policy.cfg.n_visual_tokens());

    TrainState state;
    state.stage = Stage::mpo;
    state.seed = seed;
    OptimizerState opt = make_optimizer(cfg.optimizer, policy.params());
    RewardShift shift;
    shift.decay = cfg.mpo.shift_decay;

    // The reference is the policy as it stood when preference training began.
    Model reference = policy.clone();
    const bool resuming = in_state.stage == Stage::mpo;
    if (resuming) {
        policy = load_model(ck, &opt, &in_state);
        state.step = in_state.step;
        shift.value = in_state.reward_shift;
        for (auto& [name, t] : reference.named_params()) {
            const Tensor* src = ck.find("ref." + name);
            if (!src) throw FormatError("mpo checkpoint is missing reference tensor ref." + name);
            std::copy_n(src->data().data(), src->data().size(), t.data().data());
        }
    }

    // Preference pairs.
    std::vector<PreferencePair> pairs;
    if (cfg.data_source == "jsonl") {
        for (const auto& rec : ingest_preference_jsonl(cfg.data_path))
            pairs.push_back(build_preference_pair(rec, vocab, n_visual));
    } else {
        Rng rng = derive_rng(cfg.data_seed, "pairs");
        for (const auto& item : gen_reasoning_task(rng, static_cast<int>(cfg.n_pairs), gen_config(policy.cfg)))
            pairs.push_back(build_preference_pair(reasoning_preference_record(rng, item), vocab, n_visual));
    }
    if (pairs.empty()) throw DataError("mpo: empty preference pool");

    MetricsLog metrics(cfg.metrics_out);
    RunSummary summary;
    summary.stage = Stage::mpo;

    for (int64_t step = state.step; step < cfg.steps; ++step) {
        Rng rng = derive_rng(seed, "mpo-batch", static_cast<uint64_t>(step));
        Tape tape;
        double loss_sum = 0, lp_sum = 0, lq_sum = 0, lg_sum = 0, margin_sum = 0, reward_sum = 0;
        const int64_t bsz = std::min<int64_t>(cfg.batch_size, static_cast<int64_t>(pairs.size()));
        Tensor total_loss;
        for (int64_t k = 0; k < bsz; ++k) {
            const auto& pair = pairs[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pairs.size())))];
            std::vector<double> deltas(pair.query.images.size(), 1.0);
            if (cfg.delta_policy == DeltaPolicy::sample)
                deltas = sample_delta(rng, static_cast<int>(pair.query.images.size()));
            else
                std::fill(deltas.begin(), deltas.end(), cfg.delta_value);
            MpoTerms terms;
            Tensor loss = mpo_loss(&tape, cfg.mpo, pair, policy, reference, deltas, shift.value, &terms);
            Tensor scaled = scale(&tape, loss, 1.0 / static_cast<double>(bsz));
            total_loss = total_loss.defined() ? add(&tape, total_loss, scaled) : scaled;
            loss_sum += terms.total;
            lp_sum += terms.preference;
            lq_sum += terms.quality;
            lg_sum += terms.generation;
            margin_sum += terms.margin;
            reward_sum += 0.5 * (terms.chosen_reward + terms.rejected_reward);
        }
        tape.backward(total_loss);
        tape.clear();
        if (cfg.lr_decay)
            opt.cfg.lr = cfg.optimizer.lr *
                         (1.0 - static_cast<double>(step) / static_cast<double>(std::max<int64_t>(cfg.steps, 1)));
        const bool applied = optimizer_step(opt, policy.params());
        policy.zero_grad();
        if (!applied) {
            std::cerr << "warning: non-finite gradient at mpo step " << step << "; update skipped\n";
            ++summary.skipped_steps;
        }
        // Loss at this step used the previous shift; fold in this step's rewards after.
        const double new_shift = shift.update(reward_sum / static_cast<double>(bsz));
        const double inv = 1.0 / static_cast<double>(bsz);
        metrics.line(json{{"step", step},
                          {"stage", "mpo"},
                          {"loss", loss_sum * inv},
                          {"L_p", lp_sum * inv},
                          {"L_q", lq_sum * inv},
                          {"L_g", lg_sum * inv},
                          {"margin", margin_sum * inv},
                          {"shift", new_shift},
                          {"skipped", !applied}});
        summary.final_loss = loss_sum * inv;
        ++summary.steps_run;
        state.step = step + 1;
        state.reward_shift = shift.value;
    }

    state.rng_state = derive_rng(seed, "run", static_cast<uint64_t>(state.step)).serialize();
    if (!cfg.ckpt_out.empty()) {
        ensure_parent_dir(cfg.ckpt_out);
        Checkpoint out = make_checkpoint(policy, &opt, state);
        for (const auto& [name, t] : reference.named_params()) out.add("ref." + name, t);
        out.save(cfg.ckpt_out);
    }
    summary.ckpt_out = cfg.ckpt_out;
    summary.metrics_out = cfg.metrics_out;
    return summary;
}

// ---- eval ------------------------------------------------------------------------------------

namespace {

PositionMap arange_positions(const PackedBatch& batch) {
    PositionMap pm;
    pm.positions.reserve(static_cast<size_t>(batch.length()));
    for (int64_t si = 0; si < batch.num_samples(); ++si) {
        const int64_t len = batch.sample_begin[static_cast<size_t>(si) + 1] - batch.sample_begin[static_cast<size_t>(si)];
        for (int64_t i = 0; i < len; ++i) pm.positions.push_back(static_cast<double>(i));
    }
    return pm;
}

// Teacher-forced loss-token accuracy of a pool under a position strategy.
double pool_accuracy(const Model& model, const std::vector<Sample>& pool, WeightingScheme scheme,
                     std::optional<double> fixed_delta, bool baseline_arange) {
    int64_t tokens = 0, correct = 0;
    for (const auto& s : pool) {
        PackedBatch b = pack_single(s);
        PositionMap pm;
        if (baseline_arange) {
            pm = arange_positions(b);
        } else {
            double d = fixed_delta.value_or(1.0);
            if (!fixed_delta) {
                int64_t visual = 0;
                for (auto m : b.modality) visual += (m == Modality::visual);
                d = choose_inference_delta(b.length() - visual, visual, model.cfg.context_window);
            }
            pm = batch_positions(b, std::vector<double>(b.images.size(), d));
        }
        Tensor logits = model_forward(nullptr, model, b, pm);
        PretrainLossInfo info;
        try {
            pretrain_loss_on_logits(nullptr, logits, b, scheme, &info);
        } catch (const DegenerateBatchError&) {
            continue;
        }
        tokens += info.loss_tokens;
        correct += info.correct;
    }
    return tokens ? static_cast<double>(correct) / static_cast<double>(tokens) : 0.0;
}

}  // namespace

EvalReport run_eval(const RunConfig& cfg) {
    if (cfg.stage != Stage::eval) throw ContractError("run_eval called with wrong stage");
    cfg.validate();
    if (cfg.ckpt_in.empty()) throw ConfigError("eval requires --ckpt");
    const Vocab vocab = load_vocab(cfg);
    Checkpoint ck = Checkpoint::load(cfg.ckpt_in);
    Model model = load_model(ck, nullptr, nullptr);
    const int n_visual = static_cast<int>(model.cfg.n_visual_tokens());
    const GenConfig gc = gen_config(model.cfg);
    RunConfig ecfg = cfg;  // held-out corpora follow the evaluated model's geometry
    ecfg.model = model.cfg;

    // Held-in pools (same derivations as training) for teacher-forced accuracy.
    Rng crng = derive_rng(cfg.data_seed, "caption");
    auto caption_records = gen_caption_task(crng, static_cast<int>(cfg.n_caption), gc);
    std::vector<Sample> caption_pool;
    for (const auto& r : caption_records) caption_pool.push_back(build_sample(r, vocab, n_visual));
    Rng trng = derive_rng(cfg.data_seed, "count");
    auto count_records = gen_count_task(trng, static_cast<int>(cfg.n_count));
    std::vector<Sample> count_pool;
    for (const auto& r : count_records) count_pool.push_back(build_sample(r, vocab, n_visual));

    // Held-out corpora.
    Rng hrng = derive_rng(cfg.data_seed, "reasoning-heldout");
    auto heldout_items = gen_reasoning_task(hrng, static_cast<int>(cfg.eval_n), gc);
    auto pairs = heldout_pairs(ecfg, vocab, cfg.eval_pairs);

    std::vector<std::pair<std::string, std::optional<double>>> rows;  // label, fixed delta (nullopt = auto)
    bool with_baseline = false;
    switch (cfg.delta_policy) {
        case DeltaPolicy::fixed: rows.emplace_back(delta_str(cfg.delta_value), cfg.delta_value); break;
        case DeltaPolicy::automatic: rows.emplace_back("auto", std::nullopt); break;
        case DeltaPolicy::sweep:
            for (double d : kDeltaSet) rows.emplace_back(delta_str(d), d);
            with_baseline = true;
            break;
        case DeltaPolicy::sample:
            throw ConfigError("eval accepts delta policy fixed, auto, or sweep");
    }

    EvalReport report;
    auto eval_row = [&](const std::string& label, std::optional<double> fixed, bool baseline) {
        EvalRow row;
        row.delta_label = label;
        row.text_accuracy = pool_accuracy(model, count_pool, cfg.weighting, fixed, baseline);
        row.caption_accuracy = pool_accuracy(model, caption_pool, cfg.weighting, fixed, baseline);
        // Greedy caption reproduction on the held-in caption corpus.
        int64_t em = 0;
        for (const auto& rec : caption_records) {
            PretrainRecord prompt_rec = rec;
            prompt_rec.target = "";
            Sample prompt = build_prompt(prompt_rec, vocab, n_visual);
            const double d = baseline ? 1.0 : fixed.value_or(1.0);
            GenerateResult gen = generate(model, prompt, {d}, static_cast<int>(cfg.max_new), GenMode::greedy);
            std::vector<int> text = gen.new_tokens;
            if (!text.empty() && text.back() == tok::eos) text.pop_back();
            em += (vocab.decode(text) == rec.target);
        }
        row.caption_exact_match =
            caption_records.empty() ? 0.0 : static_cast<double>(em) / static_cast<double>(caption_records.size());
        row.reasoning_answer_accuracy = reasoning_accuracy(model, vocab, heldout_items, cfg.max_new);
        row.margin_mean = pairs.empty() ? 0.0 : mean_margin(model, pairs, {baseline ? 1.0 : fixed.value_or(1.0)});
        report.rows.push_back(row);
    };

    for (const auto& [label, fixed] : rows) eval_row(label, fixed, false);
    if (with_baseline) eval_row("baseline", std::nullopt, true);

    if (!cfg.metrics_out.empty()) {
        ensure_parent_dir(cfg.metrics_out);
        std::ofstream out(cfg.metrics_out, std::ios::trunc);
        if (!out) throw DataError("cannot write eval report: " + cfg.metrics_out);
        for (const auto& r : report.rows)
            out << json{{"delta", r.delta_label},
                        {"text_acc", r.text_accuracy},
                        {"caption_acc", r.caption_accuracy},
                        {"caption_em", r.caption_exact_match},
                        {"reasoning_acc", r.reasoning_answer_accuracy},
                        {"margin", r.margin_mean}}
                       .dump()
                << "\n";
    }
    return report;
}

// ---- best-of-n -----------------------------------------------------------------------------------

BonSummary run_bon(const RunConfig& cfg) {
    if (cfg.stage != Stage::bon) throw ContractError("run_bon called with wrong stage");
    cfg.validate();
    const Vocab vocab = load_vocab(cfg);

    std::optional<Model> critic;
    if (cfg.bon_critic == "model") {
        Checkpoint ck = Checkpoint::load(cfg.ckpt_in);
        TrainState in_state;
        critic = load_model(ck, nullptr, &in_state);
        check_stage_provenance(cfg, in_state, Stage::prm);
    }
    const GenConfig gc = gen_config(critic ? critic->cfg : cfg.model);

    SolutionScorer scorer;
    if (critic) {
        const Model& c = *critic;
        scorer = [&c](const StepwiseSolution& s) {
            return score_solution(c, s, std::vector<double>(s.image ? 1 : 0, 1.0));
        };
    } else {
        scorer = oracle_scorer(vocab);
    }

    Rng qrng = derive_rng(cfg.data_seed, "bon-q");
    auto questions = gen_reasoning_task(qrng, static_cast<int>(cfg.bon_questions), gc);

    std::ofstream report_file;
    if (!cfg.bon_report.empty()) {
        ensure_parent_dir(cfg.bon_report);
        report_file.open(cfg.bon_report, std::ios::trunc);
        if (!report_file) throw DataError("cannot write bon report: " + cfg.bon_report);
    }

    BonSummary summary;
    for (size_t qi = 0; qi < questions.size(); ++qi) {
        const ReasoningItem& gold = questions[qi];
        std::vector<StepwiseSolution> candidates;
        for (int64_t ci = 0; ci < cfg.bon_n; ++ci) {
            Rng crng = derive_rng(cfg.data_seed, "bon-cand", static_cast<uint64_t>(qi) * 4096 + static_cast<uint64_t>(ci));
            if (crng.uniform() < cfg.bon_p_correct)
                candidates.push_back(solution_from_item(gold, vocab));
            else
                candidates.push_back(solution_from_item(corrupt_reasoning(crng, gold), vocab));
        }
        BoNResult res = best_of_n(scorer, candidates);
        const auto& sel = candidates[static_cast<size_t>(res.selected)];
        const bool correct = sel.answer && *sel.answer == gold.answer;
        summary.correct += correct;
        ++summary.questions;
        if (report_file) {
            json scores = json::array();
            for (const auto& s : res.scores) scores.push_back(s.solution_score);
            report_file << json{{"question_id", qi},
                                {"scores", scores},
                                {"selected", res.selected},
                                {"answer", sel.answer ? std::to_string(*sel.answer) : ""},
                                {"correct", correct}}
                               .dump()
                        << "\n";
        }
    }
    summary.accuracy =
        summary.questions ? static_cast<double>(summary.correct) / static_cast<double>(summary.questions) : 0.0;
    summary.report_path = cfg.bon_report;
    return summary;
}

}  // namespace natimm
