#pragma once

#include <functional>
#include <vector>

#include "natimm/model.hpp"
#include "natimm/types.hpp"
#include "natimm/vocab.hpp"

namespace natimm {

// Multi-turn formatting of a stepwise solution:
//   <bos> [<img> ... </img>] question s_0 SLOT s_1 SLOT ... s_n SLOT
// Each SLOT is a single token position whose prediction target is the +/- label.
// For labeled solutions the slot carries the gold label token (teacher forcing);
// unlabeled solutions get "+" placeholders, which score_solution overwrites
// turn by turn with the critic's own greedy label.
struct MultiTurnSequence {
    Sample sample;                   // loss mask true exactly at slot positions
    std::vector<int64_t> slots;      // slot token indices
};

MultiTurnSequence format_multiturn(const StepwiseSolution& sol, int n_visual);

// Per-step probability of "+" (renormalized over the {+,-} pair) and their mean.
struct StepScore {
    std::vector<double> step_scores;
    double solution_score = 0.0;
};

StepScore make_step_score(std::vector<double> step_scores);

// Scores an unlabeled solution turn by turn: each slot's score is the critic's
// renormalized "+" probability given the question, previous steps, and the
// critic's own greedy labels at earlier slots.
StepScore score_solution(const Model& critic, const StepwiseSolution& sol,
                         const std::vector<double>& delta_per_image);

// Teacher-forced slot predictions on a labeled solution: fraction of slots where
// the critic's argmax over {+,-} equals the gold label.
double slot_accuracy(const Model& critic, const std::vector<StepwiseSolution>& labeled,
                     const std::vector<double>& delta_per_image);

struct BoNResult {
    std::vector<StepScore> scores;
    int selected = -1;
    bool tie = false;  // true when another candidate shares the best score
};

using SolutionScorer = std::function<StepScore(const StepwiseSolution&)>;

// Scores every candidate and returns the argmax; ties resolve to the lowest index.
BoNResult best_of_n(const SolutionScorer& scorer, const std::vector<StepwiseSolution>& candidates);
BoNResult best_of_n(const Model& critic, const std::vector<StepwiseSolution>& candidates,
                    const std::vector<double>& delta_per_image);

// Ground-truth scorer: per-step 0/1 from the arithmetic evaluator (the oracle
// critic used for Best-of-N scaling runs).
SolutionScorer oracle_scorer(const Vocab& vocab);

}  // namespace natimm
