#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "oodseg/eval.hpp"
#include "oodseg/network.hpp"
#include "oodseg/objectives.hpp"
#include "oodseg/splits.hpp"
#include "oodseg/synthgen.hpp"

namespace oodseg {

enum class Method { erm, vrex, domain_prediction, combined };

Method parse_method(const std::string& s);
const char* to_string(Method m);
bool is_domain_method(Method m);

struct TrainConfig {
    Method method = Method::erm;
    LossWeights weights;                     // lambda / alpha / beta
    VrexBase vrex_base = VrexBase::mean;     // combined objective uses sum
    double learning_rate = 5e-5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::map<int, int> batch_sizes;          // env -> B_d; empty = derive from budget
    int batch_budget = 6;
    int max_epochs = 100;
    int patience = 20;
    int warmup_epochs = 0;                   // segmentation-only stage
    int joint_epochs = 0;                    // + domain-predictor stage, no confusion
    double plateau_factor = 1.0;             // < 1 enables lr reduction on plateau
    int plateau_patience = 10;
    bool augment = false;
    AugmentationConfig aug;
    bool log_irmv1 = false;                  // experimental; value logged, never trained on
    std::uint64_t seed = 0;

    void validate() const;
};

/// Per-step sub-batch sizes and the resulting epoch length. B_d is
/// proportional to the environment's training-set size (min 1), so every
/// environment finishes its epoch in the same number of steps.
struct BatchLayout {
    std::map<int, int> seg_batch; // envs with labeled training data
    std::map<int, int> dp_batch;  // envs feeding the domain predictor
    int steps_per_epoch = 0;
};

std::map<int, int> derive_batch_sizes(const std::map<int, int>& sizes, int budget);
BatchLayout make_env_batches(const SplitPlan& plan, int fold, const TrainConfig& cfg);

/// Ids an environment contributes at one training step; deterministic in
/// (seed, epoch, step) and independent of any other stream.
std::vector<std::string> step_batch_ids(const std::vector<std::string>& pool,
                                        int batch, std::uint64_t seed,
                                        const char* purpose, int env_id, int epoch,
                                        int step);

struct EpochRecord {
    int epoch = 0;
    std::string phase; // main | warmup | joint | adversarial
    double lr = 0.0;
    double total = 0.0;
    double risk_mean = 0.0;
    double risk_var = 0.0;
    std::vector<std::pair<int, double>> env_risk;
    std::vector<std::pair<int, double>> seg_gnorm; // seg-head grad norm per env
    std::vector<std::pair<int, int>> dp_seen;      // dp samples consumed per env
    double domain_loss_value = std::numeric_limits<double>::quiet_NaN();
    double confusion_value = std::numeric_limits<double>::quiet_NaN();
    double irmv1 = std::numeric_limits<double>::quiet_NaN();
    double val_dice = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::pair<int, double>> val_env_dice;
    double val_domacc = std::numeric_limits<double>::quiet_NaN();
};

std::string format_epoch_record(const EpochRecord& rec);
EpochRecord parse_epoch_record(const std::string& line);

struct TrainState {
    UNet3D model;
    int epoch = 0;
    double best_val_score = 0.0;
    int best_epoch = 0;
    int epochs_since_improvement = 0;
    std::vector<EpochRecord> history;

    explicit TrainState(UNet3D m) : model(std::move(m)) {}
};

struct ValMetrics {
    double mean_dice = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::pair<int, double>> env_dice;
    double domain_acc = std::numeric_limits<double>::quiet_NaN();
};

/// Runs one training schedule. `run_dir` receives log.txt, best/last
/// checkpoints and the optimizer state; pass "" for an in-memory run. When
/// the run directory already holds a compatible log and last checkpoint, the
/// schedule resumes after the last completed epoch and the result is
/// bit-identical to an uninterrupted run.
TrainState train(const std::vector<EnvironmentDataset>& data, const SplitPlan& plan,
                 int fold, const TrainConfig& cfg, const ArchConfig& arch,
                 const std::string& run_dir = "");

// Method-checked entry points.
TrainState train_erm(const std::vector<EnvironmentDataset>& data, const SplitPlan& plan,
                     int fold, const TrainConfig& cfg, const ArchConfig& arch,
                     const std::string& run_dir = "");
TrainState train_vrex(const std::vector<EnvironmentDataset>& data, const SplitPlan& plan,
                      int fold, const TrainConfig& cfg, const ArchConfig& arch,
                      const std::string& run_dir = "");
TrainState train_domain_prediction(const std::vector<EnvironmentDataset>& data,
                                   const SplitPlan& plan, int fold, const TrainConfig& cfg,
                                   const ArchConfig& arch, const std::string& run_dir = "");
TrainState train_combined(const std::vector<EnvironmentDataset>& data,
                          const SplitPlan& plan, int fold, const TrainConfig& cfg,
                          const ArchConfig& arch, const std::string& run_dir = "");

/// Validation metrics of a model under a plan/fold: mean val Dice per
/// environment (thresholding seg probabilities at 0.5) and domain accuracy
/// over the dp_val sets of the training environments.
ValMetrics validate_model(const UNet3D& model, const std::vector<EnvironmentDataset>& data,
                          const SplitPlan& plan, int fold);

/// Domain index assignment: training environments (nonempty dp_train),
/// ordered by env_id.
std::map<int, int> domain_index_map(const SplitPlan& plan, int fold);

/// Segmentation mask from logits: sigmoid > 0.5.
LabelMask predict_mask(const Tensor& seg_logits, std::int64_t sample_index,
                       const Shape3& shape);

} // namespace oodseg
