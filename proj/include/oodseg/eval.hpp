#pragma once

#include <optional>
#include <string>
#include <vector>

#include "oodseg/tensor.hpp"
#include "oodseg/volumes.hpp"

namespace oodseg {

/// Dice overlap as a percentage; evaluation convention, no smoothing, and
/// two empty masks count as perfect agreement (100).
double dice_score(const LabelMask& pred, const LabelMask& gt);

/// Percentage of argmax matches; ties break toward the lowest index.
double domain_accuracy(const Tensor& domain_logits, const std::vector<int>& labels);

enum class EnvRole { in_distribution, ood };

struct EnvResult {
    int env_id = 0;
    std::string env_name;
    EnvRole role = EnvRole::in_distribution;
    double dice = 0.0; // percent
};

/// Test metrics of one (fold, seed) replicate.
struct FoldResult {
    int fold = 0;
    std::uint64_t seed = 0;
    std::vector<EnvResult> envs;
    std::optional<double> domain_acc; // percent; absent for plain methods
};

struct EnvAggregate {
    int env_id = 0;
    std::string env_name;
    EnvRole role = EnvRole::in_distribution;
    double dice_mean = 0.0;
    double dice_std = 0.0;
};

struct MethodReport {
    std::string method;
    std::vector<EnvAggregate> envs;
    std::optional<double> domacc_mean;
    std::optional<double> domacc_std;
    int n_folds = 0;
};

/// Mean and population std across fold replicates; ordering of the input
/// does not matter.
MethodReport aggregate(const std::string& method, const std::vector<FoldResult>& folds);

/// Text table mirroring the paper's reporting layout: one row per method,
/// one column per environment (training environments marked **bold**) plus a
/// domain-accuracy column when any method reports one; "mean +- std" cells
/// rounded to one decimal.
std::string emit_table(const std::vector<MethodReport>& reports);

/// Machine-readable twin of the table. Columns:
/// method,env,role,dice_mean,dice_std,domacc_mean,domacc_std,n_folds.
/// Values are printed at full precision so the round-trip is lossless.
std::string emit_csv(const std::vector<MethodReport>& reports);
std::vector<MethodReport> parse_csv(const std::string& csv);

/// Environment with the lowest mean Dice (ties toward lowest env_id).
std::pair<int, double> worst_env_report(const MethodReport& report);

// Per-replicate result file used by the evaluate/report stages.
void save_fold_result(const FoldResult& r, const std::string& method,
                      const std::string& path);
FoldResult load_fold_result(const std::string& path, std::string* method = nullptr);

} // namespace oodseg
