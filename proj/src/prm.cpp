#include "natimm/prm.hpp"

#include <algorithm>
#include <cmath>

#include "natimm/data.hpp"

namespace natimm {

MultiTurnSequence format_multiturn(const StepwiseSolution& sol, int n_visual) {
    if (sol.steps.empty()) throw DataError("stepwise solution has no steps");
    if (!sol.labels.empty() && sol.labels.size() != sol.steps.size())
        throw DataError("labels (" + std::to_string(sol.labels.size()) + ") do not align with steps (" +
                        std::to_string(sol.steps.size()) + ")");
    MultiTurnSequence out;
    Sample& s = out.sample;
    s.kind = sol.image ? SampleKind::multimodal : SampleKind::language;
    s.tokens.push_back(tok::bos);
    if (sol.image) {
        s.tokens.push_back(tok::img_begin);
        const int64_t b = static_cast<int64_t>(s.tokens.size());
        for (int i = 0; i < n_visual; ++i) s.tokens.push_back(tok::img_ctx);
        s.tokens.push_back(tok::img_end);
        s.spans.push_back(ImageSpan{b, b + n_visual, 0});
        s.images.push_back(*sol.image);
    }
    for (int id : sol.question) s.tokens.push_back(id);
    for (size_t k = 0; k < sol.steps.size(); ++k) {
        if (sol.steps[k].empty()) throw DataError("empty step " + std::to_string(k) + " in stepwise solution");
        for (int id : sol.steps[k]) s.tokens.push_back(id);
        out.slots.push_back(static_cast<int64_t>(s.tokens.size()));
        s.tokens.push_back(sol.labels.empty() ? tok::plus
                                              : (sol.labels[k] > 0 ? tok::plus : tok::minus));
    }
    s.modality.assign(s.tokens.size(), Modality::text);
    for (const auto& sp : s.spans)
        for (int64_t i = sp.begin; i < sp.end; ++i) s.modality[static_cast<size_t>(i)] = Modality::visual;
    s.loss_mask.assign(s.tokens.size(), 0);
    for (int64_t slot : out.slots) s.loss_mask[static_cast<size_t>(slot)] = 1;
    validate_sample(s);
    return out;
}

StepScore make_step_score(std::vector<double> step_scores) {
    StepScore out;
    out.step_scores = std::move(step_scores);
    if (out.step_scores.empty()) throw ContractError("step score needs at least one step");
    double sum = 0.0;
    for (double p : out.step_scores) {
        if (!(p >= 0.0 && p <= 1.0)) throw ContractError("step score outside [0,1]");
        sum += p;
    }
    out.solution_score = sum / static_cast<double>(out.step_scores.size());
    return out;
}

namespace {

// Renormalized probability of "+" against "-" from one logit row.
double plus_probability(const Tensor& logits, int64_t row) {
    const int64_t v = logits.dim(1);
    const float* r = logits.data().data() + static_cast<size_t>(row * v);
    const double zp = r[tok::plus], zm = r[tok::minus];
    const double mx = std::max(zp, zm);
    const double ep = std::exp(zp - mx), em = std::exp(zm - mx);
    return ep / (ep + em);
}

}  // namespace

StepScore score_solution(const Model& critic, const StepwiseSolution& sol,
                         const std::vector<double>& delta_per_image) {
    StepwiseSolution unlabeled = sol;
    unlabeled.labels.clear();
    MultiTurnSequence mt = format_multiturn(unlabeled, static_cast<int>(critic.cfg.n_visual_tokens()));
    std::vector<double> scores;
    scores.reserve(mt.slots.size());
    // Turn by turn: truncate after slot k, read P(+), feed the greedy label back.
    for (size_t k = 0; k < mt.slots.size(); ++k) {
        const int64_t slot = mt.slots[k];
        Sample prefix = mt.sample;
        prefix.tokens.resize(static_cast<size_t>(slot));
        prefix.modality.resize(static_cast<size_t>(slot));
        prefix.loss_mask.assign(static_cast<size_t>(slot), 0);
        PackedBatch b = pack_single(prefix);
        PositionMap pm = batch_positions(b, delta_per_image);
        Tensor logits = model_forward(nullptr, critic, b, pm);
        const double p = plus_probability(logits, slot - 1);
        scores.push_back(p);
        mt.sample.tokens[static_cast<size_t>(slot)] = p >= 0.5 ? tok::plus : tok::minus;
    }
    return make_step_score(std::move(scores));
}

double slot_accuracy(const Model& critic, const std::vector<StepwiseSolution>& labeled,
                     const std::vector<double>& delta_per_image) {
    int64_t total = 0, correct = 0;
    for (const auto& sol : labeled) {
        if (sol.labels.empty()) throw ContractError("slot_accuracy requires labeled solutions");
        MultiTurnSequence mt = format_multiturn(sol, static_cast<int>(critic.cfg.n_visual_tokens()));
        PackedBatch b = pack_single(mt.sample);
        PositionMap pm = batch_positions(b, delta_per_image);
        Tensor logits = model_forward(nullptr, critic, b, pm);
        for (size_t k = 0; k < mt.slots.size(); ++k) {
            const double p = plus_probability(logits, mt.slots[k] - 1);
            const bool pred_plus = p >= 0.5;
            const bool gold_plus = sol.labels[k] > 0;
            correct += (pred_plus == gold_plus);
            total += 1;
        }
    }
    if (total == 0) throw ContractError("slot_accuracy: empty corpus");
    return static_cast<double>(correct) / static_cast<double>(total);
}

BoNResult best_of_n(const SolutionScorer& scorer, const std::vector<StepwiseSolution>& candidates) {
    if (candidates.empty()) throw ContractError("best_of_n: empty candidate list");
    BoNResult res;
    res.scores.reserve(candidates.size());
    for (const auto& c : candidates) res.scores.push_back(scorer(c));
    res.selected = 0;
    for (size_t i = 1; i < candidates.size(); ++i) {
        if (res.scores[i].solution_score > res.scores[static_cast<size_t>(res.selected)].solution_score)
            res.selected = static_cast<int>(i);
    }
    for (size_t i = 0; i < candidates.size(); ++i)
        if (static_cast<int>(i) != res.selected &&
            res.scores[i].solution_score == res.scores[static_cast<size_t>(res.selected)].solution_score)
            res.tie = true;
    return res;
}

BoNResult best_of_n(const Model& critic, const std::vector<StepwiseSolution>& candidates,
                    const std::vector<double>& delta_per_image) {
    return best_of_n(
        [&](const StepwiseSolution& s) { return score_solution(critic, s, delta_per_image); }, candidates);
}

SolutionScorer oracle_scorer(const Vocab& vocab) {
    return [&vocab](const StepwiseSolution& sol) {
        if (!sol.image) throw DataError("oracle scorer requires an image");
        std::vector<std::string> steps;
        steps.reserve(sol.steps.size());
        for (const auto& s : sol.steps) steps.push_back(vocab.decode(s));
        auto labels = evaluate_steps(*sol.image, vocab.decode(sol.question), steps);
        std::vector<double> scores;
        scores.reserve(labels.size());
        for (auto l : labels) scores.push_back(l > 0 ? 1.0 : 0.0);
        return make_step_score(std::move(scores));
    };
}

}  // namespace natimm
