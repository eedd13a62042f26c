#include "natimm/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace natimm {

using nlohmann::json;

// ---- validation ------------------------------------------------------------------

void validate_image(const SyntheticImage& img) {
    if (img.h <= 0 || img.w <= 0)
        throw DataError("image dims must be positive, got " + std::to_string(img.h) + "x" + std::to_string(img.w));
    if (static_cast<int>(img.cells.size()) != img.h * img.w)
        throw DataError("image grid has " + std::to_string(img.cells.size()) + " cells, expected " +
                        std::to_string(img.h * img.w));
    for (int c : img.cells)
        if (c < 0 || c >= kPaletteSize)
            throw DataError("image cell value " + std::to_string(c) + " outside palette [0," +
                            std::to_string(kPaletteSize) + ")");
}

int64_t Sample::loss_token_count() const {
    int64_t l = 0;
    for (auto m : loss_mask) l += (m != 0);
    return l;
}

void validate_sample(const Sample& s) {
    const size_t n = s.tokens.size();
    if (s.modality.size() != n || s.loss_mask.size() != n)
        throw DataError("sample: tokens/modality/loss_mask lengths disagree");
    if (n == 0) throw DataError("sample: empty token sequence");
    if (s.loss_mask[0]) throw DataError("sample: first token cannot bear loss");
    std::vector<uint8_t> in_span(n, 0);
    for (const auto& sp : s.spans) {
        if (sp.begin < 0 || sp.end > static_cast<int64_t>(n) || sp.begin >= sp.end)
            throw DataError("sample: image span out of bounds");
        if (sp.image_index < 0 || sp.image_index >= static_cast<int>(s.images.size()))
            throw DataError("sample: image span references missing image " + std::to_string(sp.image_index));
        for (int64_t i = sp.begin; i < sp.end; ++i) in_span[static_cast<size_t>(i)] = 1;
    }
    for (size_t i = 0; i < n; ++i) {
        const bool visual = s.modality[i] == Modality::visual;
        if (visual != (in_span[i] != 0))
            throw DataError("sample: modality/span disagreement at token " + std::to_string(i));
        if (visual && s.loss_mask[i]) throw DataError("sample: loss mask set on visual token " + std::to_string(i));
        if (visual && s.tokens[i] != tok::img_ctx)
            throw DataError("sample: visual token " + std::to_string(i) + " is not <imgctx>");
    }
    if (s.kind == SampleKind::language && (!s.images.empty() || !s.spans.empty()))
        throw DataError("sample: language sample carries an image");
    for (const auto& img : s.images) validate_image(img);
}

// ---- record <-> image ---------------------------------------------------------------

ImageRecord to_record(const SyntheticImage& img) { return ImageRecord{img.h, img.w, img.cells}; }

SyntheticImage to_image(const ImageRecord& rec) {
    SyntheticImage img{rec.h, rec.w, rec.grid};
    validate_image(img);
    return img;
}

// ---- JSONL ingestion ------------------------------------------------------------------

namespace {

[[noreturn]] void ingest_fail(const std::string& path, size_t line, const std::string& field,
                              const std::string& reason) {
    throw FormatError(path + ": line " + std::to_string(line) + ": field \"" + field + "\": " + reason);
}

json parse_line(const std::string& path, size_t line, const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) ingest_fail(path, line, "-", "not valid JSON");
    if (!j.is_object()) ingest_fail(path, line, "-", "expected a JSON object");
    return j;
}

std::string need_string(const std::string& path, size_t line, const json& j, const char* field) {
    if (!j.contains(field)) ingest_fail(path, line, field, "missing");
    if (!j[field].is_string()) ingest_fail(path, line, field, "expected a string");
    return j[field].get<std::string>();
}

std::optional<ImageRecord> optional_image(const std::string& path, size_t line, const json& j) {
    if (!j.contains("image") || j["image"].is_null()) return std::nullopt;
    const json& im = j["image"];
    if (!im.is_object() || !im.contains("h") || !im.contains("w") || !im.contains("grid"))
        ingest_fail(path, line, "image", "expected {\"h\":int,\"w\":int,\"grid\":[int,...]}");
    ImageRecord rec;
    if (!im["h"].is_number_integer() || !im["w"].is_number_integer())
        ingest_fail(path, line, "image", "h/w must be integers");
    rec.h = im["h"].get<int>();
    rec.w = im["w"].get<int>();
    if (!im["grid"].is_array()) ingest_fail(path, line, "image", "grid must be an array");
    for (const auto& v : im["grid"]) {
        if (!v.is_number_integer()) ingest_fail(path, line, "image", "grid entries must be integers");
        rec.grid.push_back(v.get<int>());
    }
    try {
        to_image(rec);
    } catch (const DataError& e) {
        ingest_fail(path, line, "image", e.what());
    }
    return rec;
}

template <typename Fn>
void for_each_line(const std::string& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        fn(lineno, line);
    }
}

}  // namespace

std::vector<PretrainRecord> ingest_pretrain_jsonl(const std::string& path) {
    std::vector<PretrainRecord> out;
    for_each_line(path, [&](size_t lineno, const std::string& line) {
        json j = parse_line(path, lineno, line);
        PretrainRecord rec;
        const std::string kind = need_string(path, lineno, j, "kind");
        if (kind == "language")
            rec.kind = SampleKind::language;
        else if (kind == "multimodal")
            rec.kind = SampleKind::multimodal;
        else
            ingest_fail(path, lineno, "kind", "expected \"language\" or \"multimodal\", got \"" + kind + "\"");
        rec.text = need_string(path, lineno, j, "text");
        rec.target = need_string(path, lineno, j, "target");
        rec.image = optional_image(path, lineno, j);
        if (rec.kind == SampleKind::language && rec.image)
            ingest_fail(path, lineno, "image", "language record must not carry an image");
        if (rec.kind == SampleKind::multimodal && !rec.image)
            ingest_fail(path, lineno, "image", "multimodal record requires an image");
        out.push_back(std::move(rec));
    });
    return out;
}

std::vector<PreferenceRecord> ingest_preference_jsonl(const std::string& path) {
    std::vector<PreferenceRecord> out;
    for_each_line(path, [&](size_t lineno, const std::string& line) {
        json j = parse_line(path, lineno, line);
        PreferenceRecord rec;
        rec.query = need_string(path, lineno, j, "query");
        rec.chosen = need_string(path, lineno, j, "chosen");
        rec.rejected = need_string(path, lineno, j, "rejected");
        rec.image = optional_image(path, lineno, j);
        if (rec.chosen == rec.rejected)
            ingest_fail(path, lineno, "rejected", "chosen and rejected responses must differ");
        out.push_back(std::move(rec));
    });
    return out;
}

std::vector<PrmRecord> ingest_prm_jsonl(const std::string& path) {
    std::vector<PrmRecord> out;
    for_each_line(path, [&](size_t lineno, const std::string& line) {
        json j = parse_line(path, lineno, line);
        PrmRecord rec;
        rec.question = need_string(path, lineno, j, "question");
        rec.image = optional_image(path, lineno, j);
        if (!j.contains("steps") || !j["steps"].is_array()) ingest_fail(path, lineno, "steps", "missing or not an array");
        for (const auto& s : j["steps"]) {
            if (!s.is_string()) ingest_fail(path, lineno, "steps", "entries must be strings");
            rec.steps.push_back(s.get<std::string>());
        }
        if (!j.contains("labels") || !j["labels"].is_array())
            ingest_fail(path, lineno, "labels", "missing or not an array");
        for (const auto& s : j["labels"]) {
            if (!s.is_string() || (s.get<std::string>() != "+" && s.get<std::string>() != "-"))
                ingest_fail(path, lineno, "labels", "entries must be \"+\" or \"-\"");
            rec.labels.push_back(s.get<std::string>());
        }
        if (rec.steps.empty()) ingest_fail(path, lineno, "steps", "at least one step required");
        if (rec.labels.size() != rec.steps.size())
            ingest_fail(path, lineno, "labels",
                        "got " + std::to_string(rec.labels.size()) + " labels for " +
                            std::to_string(rec.steps.size()) + " steps");
        out.push_back(std::move(rec));
    });
    return out;
}

// ---- JSONL emission ---------------------------------------------------------------------

namespace {

json image_json(const std::optional<ImageRecord>& image) {
    json j;
    if (image) j = json{{"h", image->h}, {"w", image->w}, {"grid", image->grid}};
    return j;
}

void write_lines(const std::string& path, const std::vector<json>& lines) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& j : lines) out << j.dump() << "\n";
}

}  // namespace

void emit_pretrain_jsonl(const std::string& path, const std::vector<PretrainRecord>& records) {
    std::vector<json> lines;
    lines.reserve(records.size());
    for (const auto& r : records) {
        json j{{"kind", r.kind == SampleKind::language ? "language" : "multimodal"},
               {"text", r.text},
               {"target", r.target}};
        if (r.image) j["image"] = image_json(r.image);
        lines.push_back(std::move(j));
    }
    write_lines(path, lines);
}

void emit_preference_jsonl(const std::string& path, const std::vector<PreferenceRecord>& records) {
    std::vector<json> lines;
    lines.reserve(records.size());
    for (const auto& r : records) {
        json j{{"query", r.query}, {"chosen", r.chosen}, {"rejected", r.rejected}};
        if (r.image) j["image"] = image_json(r.image);
        lines.push_back(std::move(j));
    }
    write_lines(path, lines);
}

void emit_prm_jsonl(const std::string& path, const std::vector<PrmRecord>& records) {
    std::vector<json> lines;
    lines.reserve(records.size());
    for (const auto& r : records) {
        json j{{"question", r.question}, {"steps", r.steps}, {"labels", r.labels}};
        if (r.image) j["image"] = image_json(r.image);
        lines.push_back(std::move(j));
    }
    write_lines(path, lines);
}

// ---- tokenized builders ---------------------------------------------------------------------

namespace {

// <bos> [<img> <imgctx>*n </img>] prompt...   (no eos, no loss)
Sample make_prompt(const Vocab& vocab, const std::string& text, const std::optional<ImageRecord>& image,
                   int n_visual) {
    Sample s;
    s.kind = image ? SampleKind::multimodal : SampleKind::language;
    s.tokens.push_back(tok::bos);
    if (image) {
        if (n_visual <= 0) throw ConfigError("n_visual must be positive for multimodal samples");
        s.tokens.push_back(tok::img_begin);
        const int64_t span_begin = static_cast<int64_t>(s.tokens.size());
        for (int i = 0; i < n_visual; ++i) s.tokens.push_back(tok::img_ctx);
        s.tokens.push_back(tok::img_end);
        s.spans.push_back(ImageSpan{span_begin, span_begin + n_visual, 0});
        s.images.push_back(to_image(*image));
    }
    for (int id : vocab.encode(text)) s.tokens.push_back(id);
    s.modality.assign(s.tokens.size(), Modality::text);
    for (const auto& sp : s.spans)
        for (int64_t i = sp.begin; i < sp.end; ++i) s.modality[static_cast<size_t>(i)] = Modality::visual;
    s.loss_mask.assign(s.tokens.size(), 0);
    return s;
}

}  // namespace

Sample build_prompt(const PretrainRecord& rec, const Vocab& vocab, int n_visual) {
    if (rec.kind == SampleKind::multimodal && !rec.image)
        throw DataError("multimodal record without an image");
    if (rec.kind == SampleKind::language && rec.image) throw DataError("language record with an image");
    Sample s = make_prompt(vocab, rec.text, rec.image, n_visual);
    validate_sample(s);
    return s;
}

Sample build_sample(const PretrainRecord& rec, const Vocab& vocab, int n_visual) {
    if (rec.kind == SampleKind::multimodal && !rec.image)
        throw DataError("multimodal record without an image");
    if (rec.kind == SampleKind::language && rec.image) throw DataError("language record with an image");
    Sample s = make_prompt(vocab, rec.text, rec.image, n_visual);
    for (int id : vocab.encode(rec.target)) {
        s.tokens.push_back(id);
        s.modality.push_back(Modality::text);
        s.loss_mask.push_back(1);
    }
    s.tokens.push_back(tok::eos);
    s.modality.push_back(Modality::text);
    s.loss_mask.push_back(1);
    validate_sample(s);
    return s;
}

PreferencePair build_preference_pair(const PreferenceRecord& rec, const Vocab& vocab, int n_visual) {
    PreferencePair pair;
    pair.query = make_prompt(vocab, rec.query, rec.image, n_visual);
    validate_sample(pair.query);
    pair.chosen = vocab.encode(rec.chosen);
    pair.chosen.push_back(tok::eos);
    pair.rejected = vocab.encode(rec.rejected);
    pair.rejected.push_back(tok::eos);
    if (pair.chosen == pair.rejected) throw DataError("preference pair with identical responses");
    return pair;
}

StepwiseSolution build_solution(const PrmRecord& rec, const Vocab& vocab) {
    if (rec.steps.empty()) throw DataError("stepwise solution needs at least one step");
    StepwiseSolution sol;
    if (rec.image) sol.image = to_image(*rec.image);
    sol.question = vocab.encode(rec.question);
    for (const auto& s : rec.steps) {
        sol.steps.push_back(vocab.encode(s));
        if (sol.steps.back().empty()) throw DataError("empty step in stepwise solution");
    }
    for (const auto& l : rec.labels) sol.labels.push_back(l == "+" ? int8_t{1} : int8_t{-1});
    if (!sol.labels.empty() && sol.labels.size() != sol.steps.size())
        throw DataError("labels do not align with steps");
    return sol;
}

PrmRecord to_prm_record(const StepwiseSolution& sol, const Vocab& vocab) {
    PrmRecord rec;
    if (sol.image) rec.image = to_record(*sol.image);
    rec.question = vocab.decode(sol.question);
    for (const auto& s : sol.steps) rec.steps.push_back(vocab.decode(s));
    for (auto l : sol.labels) rec.labels.push_back(l > 0 ? "+" : "-");
    return rec;
}

// ---- caption task -----------------------------------------------------------------------------

namespace {
const char* kColors[4] = {"red", "green", "blue", "yellow"};
const char* kShapes[4] = {"circle", "square", "triangle", "star"};
}  // namespace

std::string caption_for_grid(const SyntheticImage& img) {
    std::string caption;
    for (int i = 0; i < img.h * img.w; ++i) {
        const int v = img.cells[static_cast<size_t>(i)];
        if (v == 0) continue;
        const int color = (v - 1) / 4, shape = (v - 1) % 4;
        if (!caption.empty()) caption += " and ";
        caption += std::string("a ") + kColors[color] + " " + kShapes[shape];
    }
    return caption.empty() ? "nothing" : caption;
}

std::vector<PretrainRecord> gen_caption_task(Rng& rng, int n, const GenConfig& gc) {
    std::vector<PretrainRecord> out;
    out.reserve(static_cast<size_t>(n));
    // Shapes live in the top-left 4x4 cell block (the grid's active corner,
    // shared with the reasoning task's digit cells).
    const int active = std::min(4, std::min(gc.img_h, gc.img_w));
    for (int i = 0; i < n; ++i) {
        SyntheticImage img{gc.img_h, gc.img_w, std::vector<int>(static_cast<size_t>(gc.img_h * gc.img_w), 0)};
        const int k = static_cast<int>(rng.uniform_int(4));  // 0..3 shapes; 0 exercises the empty caption
        for (int s = 0; s < k; ++s) {
            int r = static_cast<int>(rng.uniform_int(active));
            int c = static_cast<int>(rng.uniform_int(active));
            while (img.at(r, c) != 0) {
                r = static_cast<int>(rng.uniform_int(active));
                c = static_cast<int>(rng.uniform_int(active));
            }
            const int color = static_cast<int>(rng.uniform_int(4));
            const int shape = static_cast<int>(rng.uniform_int(4));
            img.cells[static_cast<size_t>(r * img.w + c)] = 1 + color * 4 + shape;
        }
        PretrainRecord rec;
        rec.kind = SampleKind::multimodal;
        rec.image = to_record(img);
        rec.text = "";
        rec.target = caption_for_grid(img);
        out.push_back(std::move(rec));
    }
    return out;
}

// ---- counting task -----------------------------------------------------------------------------

std::vector<PretrainRecord> gen_count_task(Rng& rng, int n) {
    std::vector<PretrainRecord> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int start = static_cast<int>(rng.uniform_int(151));
        PretrainRecord rec;
        rec.kind = SampleKind::language;
        rec.text = "count " + std::to_string(start) + " :";
        rec.target = std::to_string(start + 1) + " " + std::to_string(start + 2) + " " + std::to_string(start + 3);
        out.push_back(std::move(rec));
    }
    return out;
}

// ---- reasoning task -----------------------------------------------------------------------------

namespace {

enum class Op1 { sum, diff, product };
enum class Op2 { dbl, increment, decrement };

const char* op1_word(Op1 o) { return o == Op1::sum ? "sum" : o == Op1::diff ? "diff" : "product"; }
const char* op2_word(Op2 o) { return o == Op2::dbl ? "double" : o == Op2::increment ? "increment" : "decrement"; }

int apply_op(int x, const std::string& op, int y) {
    if (op == "+") return x + y;
    if (op == "-") return x - y;
    if (op == "*") return x * y;
    return INT32_MIN;
}

std::string render_step(int x, const char* op, int y, int z) {
    return std::to_string(x) + " " + op + " " + std::to_string(y) + " = " + std::to_string(z);
}

struct ParsedQuestion {
    Op1 op1;
    Op2 op2;
    bool ok = false;
};

ParsedQuestion parse_question(const std::string& question) {
    std::istringstream in(question);
    std::string w1, then, w2, extra;
    ParsedQuestion q{};
    if (!(in >> w1 >> then >> w2) || then != "then" || (in >> extra)) return q;
    if (w1 == "sum")
        q.op1 = Op1::sum;
    else if (w1 == "diff")
        q.op1 = Op1::diff;
    else if (w1 == "product")
        q.op1 = Op1::product;
    else
        return q;
    if (w2 == "double")
        q.op2 = Op2::dbl;
    else if (w2 == "increment")
        q.op2 = Op2::increment;
    else if (w2 == "decrement")
        q.op2 = Op2::decrement;
    else
        return q;
    q.ok = true;
    return q;
}

// Expected operands (x, op, y) for step k given the chain value so far.
struct ExpectedStep {
    int x;
    const char* op;
    int y;
};

ExpectedStep expected_step(const ParsedQuestion& q, int k, int d0, int d1, int prev) {
    if (k == 0) {
        switch (q.op1) {
            case Op1::sum: return {d0, "+", d1};
            case Op1::diff: return {std::max(d0, d1), "-", std::min(d0, d1)};
            case Op1::product: return {d0, "*", d1};
        }
    }
    switch (q.op2) {
        case Op2::dbl: return {prev, "*", 2};
        case Op2::increment: return {prev, "+", 3};
        case Op2::decrement: return {prev, "-", 1};
    }
    return {0, "+", 0};
}

}  // namespace

std::vector<ReasoningItem> gen_reasoning_task(Rng& rng, int n, const GenConfig& gc) {
    std::vector<ReasoningItem> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int d0 = 1 + static_cast<int>(rng.uniform_int(9));
        const int d1 = 1 + static_cast<int>(rng.uniform_int(9));
        Op1 op1 = static_cast<Op1>(rng.uniform_int(3));
        Op2 op2 = static_cast<Op2>(rng.uniform_int(3));
        ParsedQuestion q{op1, op2, true};
        const ExpectedStep e1 = expected_step(q, 0, d0, d1, 0);
        const int r1 = apply_op(e1.x, e1.op, e1.y);
        if (r1 == 0 && op2 == Op2::decrement) op2 = Op2::increment;  // keep results non-negative
        q.op2 = op2;
        const ExpectedStep e2 = expected_step(q, 1, d0, d1, r1);
        const int r2 = apply_op(e2.x, e2.op, e2.y);

        ReasoningItem item;
        item.image = SyntheticImage{gc.img_h, gc.img_w, std::vector<int>(static_cast<size_t>(gc.img_h * gc.img_w), 0)};
        item.image.cells[0] = d0 + 1;
        item.image.cells[1] = d1 + 1;
        item.question = std::string(op1_word(op1)) + " then " + op2_word(op2);
        item.steps.push_back(render_step(e1.x, e1.op, e1.y, r1));
        item.steps.push_back(render_step(e2.x, e2.op, e2.y, r2));
        item.answer = r2;
        out.push_back(std::move(item));
    }
    return out;
}

ReasoningItem corrupt_reasoning(Rng& rng, const ReasoningItem& item) {
    ParsedQuestion q = parse_question(item.question);
    if (!q.ok) throw DataError("cannot corrupt: unparseable question \"" + item.question + "\"");
    const int d0 = item.image.cells[0] - 1, d1 = item.image.cells[1] - 1;
    const size_t bad = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(item.steps.size())));
    const int offset = 1 + static_cast<int>(rng.uniform_int(2));  // +1 or +2, keeps values in vocab

    ReasoningItem out = item;
    out.steps.clear();
    int prev = 0;
    for (size_t k = 0; k < item.steps.size(); ++k) {
        const ExpectedStep e = expected_step(q, static_cast<int>(k), d0, d1, prev);
        int z = apply_op(e.x, e.op, e.y);
        if (k == bad) z += offset;
        out.steps.push_back(render_step(e.x, e.op, e.y, z));
        prev = z;  // later steps continue from the wrong value
    }
    out.answer = prev;
    return out;
}

std::vector<int8_t> evaluate_steps(const SyntheticImage& image, const std::string& question,
                                   const std::vector<std::string>& steps) {
    ParsedQuestion q = parse_question(question);
    const int d0 = image.cells.size() > 1 ? image.cells[0] - 1 : -1;
    const int d1 = image.cells.size() > 1 ? image.cells[1] - 1 : -1;
    std::vector<int8_t> labels;
    labels.reserve(steps.size());
    int prev = 0;
    for (size_t k = 0; k < steps.size(); ++k) {
        int8_t label = -1;
        std::istringstream in(steps[k]);
        std::string xs, op, ys, eq, zs, extra;
        if (q.ok && k < 2 && d0 >= 0 && d1 >= 0 && (in >> xs >> op >> ys >> eq >> zs) && eq == "=" &&
            !(in >> extra)) {
            try {
                const int x = std::stoi(xs), y = std::stoi(ys), z = std::stoi(zs);
                const ExpectedStep e = expected_step(q, static_cast<int>(k), d0, d1, prev);
                if (x == e.x && op == e.op && y == e.y && z == apply_op(x, op, y)) label = 1;
                prev = z;  // chain continues from the stated result either way
            } catch (const std::exception&) {
                label = -1;
            }
        }
        labels.push_back(label);
    }
    return labels;
}

std::string reasoning_response_text(const ReasoningItem& item) {
    std::string out;
    for (const auto& s : item.steps) {
        out += s;
        out += " ; ";
    }
    out += "answer " + std::to_string(item.answer);
    return out;
}

PretrainRecord reasoning_sft_record(const ReasoningItem& item) {
    PretrainRecord rec;
    rec.kind = SampleKind::multimodal;
    rec.image = to_record(item.image);
    rec.text = item.question + " :";
    rec.target = reasoning_response_text(item);
    return rec;
}

PrmRecord reasoning_prm_record(const ReasoningItem& item) {
    PrmRecord rec;
    rec.question = item.question;
    rec.image = to_record(item.image);
    rec.steps = item.steps;
    for (auto l : evaluate_steps(item.image, item.question, item.steps)) rec.labels.push_back(l > 0 ? "+" : "-");
    return rec;
}

PreferenceRecord reasoning_preference_record(Rng& rng, const ReasoningItem& item) {
    PreferenceRecord rec;
    rec.query = item.question + " :";
    rec.image = to_record(item.image);
    rec.chosen = reasoning_response_text(item);
    rec.rejected = reasoning_response_text(corrupt_reasoning(rng, item));
    return rec;
}

// ---- packing ----------------------------------------------------------------------------------

namespace {

void append_sample(PackedBatch& batch, const Sample& s) {
    const int sid = static_cast<int>(batch.num_samples());
    const int64_t base = batch.length();
    batch.sample_begin.back() = base;  // placeholder slot updated below
    batch.tokens.insert(batch.tokens.end(), s.tokens.begin(), s.tokens.end());
    batch.modality.insert(batch.modality.end(), s.modality.begin(), s.modality.end());
    batch.loss_mask.insert(batch.loss_mask.end(), s.loss_mask.begin(), s.loss_mask.end());
    batch.sample_id.insert(batch.sample_id.end(), s.tokens.size(), sid);
    for (const auto& sp : s.spans) {
        const int img = static_cast<int>(batch.images.size()) + sp.image_index;
        batch.spans.push_back(ImageSpan{sp.begin + base, sp.end + base, img});
    }
    batch.images.insert(batch.images.end(), s.images.begin(), s.images.end());
    batch.sample_loss_tokens.push_back(s.loss_token_count());
    batch.sample_begin.push_back(batch.length());
}

PackedBatch new_batch() {
    PackedBatch b;
    b.sample_begin.push_back(0);
    return b;
}

}  // namespace

PackedBatch pack_single(const Sample& sample) {
    PackedBatch b = new_batch();
    append_sample(b, sample);
    return b;
}

std::vector<PackedBatch> pack(const std::vector<Sample>& samples, int64_t context_window) {
    for (const auto& s : samples)
        if (s.length() > context_window)
            throw CapacityError("sample of length " + std::to_string(s.length()) + " exceeds context window " +
                                std::to_string(context_window));
    // first-fit-decreasing; ties keep original order
    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return samples[a].length() > samples[b].length(); });
    std::vector<std::vector<size_t>> bins;
    std::vector<int64_t> room;
    for (size_t idx : order) {
        const int64_t len = samples[idx].length();
        bool placed = false;
        for (size_t b = 0; b < bins.size(); ++b) {
            if (room[b] >= len) {
                bins[b].push_back(idx);
                room[b] -= len;
                placed = true;
                break;
            }
        }
        if (!placed) {
            bins.push_back({idx});
            room.push_back(context_window - len);
        }
    }
    std::vector<PackedBatch> out;
    out.reserve(bins.size());
    for (const auto& bin : bins) {
        PackedBatch b = new_batch();
        for (size_t idx : bin) append_sample(b, samples[idx]);
        out.push_back(std::move(b));
    }
    return out;
}

PositionMap batch_positions(const PackedBatch& batch, const std::vector<double>& delta_per_image) {
    PositionMap out;
    out.delta_per_image = delta_per_image;
    out.positions.reserve(static_cast<size_t>(batch.length()));
    for (int64_t si = 0; si < batch.num_samples(); ++si) {
        const int64_t b = batch.sample_begin[static_cast<size_t>(si)];
        const int64_t e = batch.sample_begin[static_cast<size_t>(si) + 1];
        std::vector<Modality> mod(batch.modality.begin() + b, batch.modality.begin() + e);
        std::vector<ImageSpan> spans;
        for (const auto& sp : batch.spans)
            if (sp.begin >= b && sp.end <= e) spans.push_back(ImageSpan{sp.begin - b, sp.end - b, sp.image_index});
        PositionMap local = compute_positions(mod, spans, delta_per_image);
        out.positions.insert(out.positions.end(), local.positions.begin(), local.positions.end());
    }
    return out;
}

// ---- mixture ------------------------------------------------------------------------------------

std::vector<Sample> sample_mixture(const MixtureConfig& cfg, const std::vector<Sample>& language_pool,
                                   const std::vector<Sample>& multimodal_pool, int64_t n) {
    if (cfg.language_weight < 0 || cfg.multimodal_weight < 0)
        throw ConfigError("mixture weights must be non-negative");
    if (cfg.language_weight == 0 && cfg.multimodal_weight == 0)
        throw ConfigError("mixture weights must not both be zero");
    if (cfg.language_weight > 0 && language_pool.empty())
        throw ConfigError("nonzero language weight with empty language pool");
    if (cfg.multimodal_weight > 0 && multimodal_pool.empty())
        throw ConfigError("nonzero multimodal weight with empty multimodal pool");
    const double p_multimodal = cfg.multimodal_weight / (cfg.language_weight + cfg.multimodal_weight);
    Rng rng(cfg.seed);
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const bool mm = rng.uniform() < p_multimodal;
        const auto& pool = mm ? multimodal_pool : language_pool;
        out.push_back(pool[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool.size())))]);
    }
    return out;
}

}  // namespace natimm
