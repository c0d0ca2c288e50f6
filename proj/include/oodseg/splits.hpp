#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "oodseg/synthgen.hpp"

namespace oodseg {

/// One fold's id sets for one environment. Within an environment and fold,
/// test + dp_train + dp_val partition the environment; the segmentor sets are
/// nested subsets of the domain-predictor sets and contain only labeled ids.
struct FoldSplit {
    std::vector<std::string> test;
    std::vector<std::string> dp_train;
    std::vector<std::string> dp_val;
    std::vector<std::string> seg_train;
    std::vector<std::string> seg_val;
};

struct EnvSplit {
    int env_id = 0;
    std::string name;
    std::vector<std::pair<std::string, bool>> roster; // (sample_id, labeled)
    std::vector<FoldSplit> folds;                     // size K

    bool is_labeled(const std::string& id) const;
};

struct SplitPlan {
    int k = 0;
    double val_fraction = 0.0;
    std::uint64_t seed = 0;
    std::optional<int> ood_env;
    std::vector<EnvSplit> envs;

    const EnvSplit& env(int env_id) const;
};

/// Deterministic K-fold plan. Ids are sorted before the seeded shuffle, so the
/// plan does not depend on roster order. Non-OoD environments are partitioned
/// into K near-equal test folds; the remainder splits into dp_val (at least
/// one sample, round(val_fraction * remainder)) and dp_train. The OoD
/// environment is entirely test. Same inputs give the identical plan.
SplitPlan make_folds(const std::vector<EnvRoster>& envs, int k, double val_fraction,
                     std::optional<int> ood_env, std::uint64_t seed);
SplitPlan make_folds(const std::vector<EnvironmentDataset>& envs, int k,
                     double val_fraction, std::optional<int> ood_env,
                     std::uint64_t seed);

/// Caps the segmentor's labeled sets: per environment, (n_train, n_val)
/// labeled ids drawn seed-deterministically from inside the dp sets.
/// Environments absent from the budget map keep their full labeled sets.
SplitPlan restrict_segmentor(const SplitPlan& plan,
                             const std::map<int, std::pair<int, int>>& labeled_budget);

struct PlanViolation {
    int env_id = -1;
    int fold = -1; // 1-based; -1 when not fold-specific
    std::string rule;
    std::string detail;
};

/// Empty iff every SplitPlan invariant holds.
std::vector<PlanViolation> verify_plan(const SplitPlan& plan);

// Plan file ("OODSPLITS1"): line-oriented text, one shared plan per experiment.
void save_plan(const SplitPlan& plan, const std::string& path);
SplitPlan load_plan(const std::string& path);

} // namespace oodseg
