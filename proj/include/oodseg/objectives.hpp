#pragma once

#include <vector>

#include "oodseg/tensor.hpp"

namespace oodseg {

/// Per-environment scalar risks, ordered by env_id of the contributing batch.
struct RiskVector {
    std::vector<std::pair<int, double>> risks; // (env_id, risk)

    std::size_t size() const { return risks.size(); }
    std::vector<double> values() const;
};

struct LossWeights {
    double lambda_vrex = 0.0;
    double alpha = 1.0;
    double beta = 1.0;

    void validate() const;
};

/// Base term of the V-REx objective: the printed equation divides the risk
/// sum by the number of environments, the combined objective keeps the sum.
enum class VrexBase { mean, sum };

// ---- segmentation losses ----------------------------------------------------
// Tensors are (B,1,Z,Y,X); masks hold 0/1 values. Gradient functions return
// d(loss)/d(input) with the same shape as the input.

/// Soft Dice loss, smoothing eps added to both numerator and denominator,
/// computed per sample and averaged over the batch.
double dice_loss(const Tensor& probs, const Tensor& masks, double eps = 1.0);
Tensor dice_loss_grad(const Tensor& probs, const Tensor& masks, double eps = 1.0);

/// Binary cross-entropy on logits, mean over every voxel in the batch;
/// stable against large logit magnitudes.
double bce_loss(const Tensor& logits, const Tensor& masks);
Tensor bce_loss_grad(const Tensor& logits, const Tensor& masks);

/// dice_loss(sigmoid(logits)) + bce_loss(logits).
double seg_loss(const Tensor& logits, const Tensor& masks);
Tensor seg_loss_grad(const Tensor& logits, const Tensor& masks);

Tensor sigmoid(const Tensor& logits);

// ---- risk aggregation --------------------------------------------------------

/// One seg_loss per environment, each computed on that environment's batch only.
RiskVector per_env_risks(const std::vector<std::pair<int, double>>& env_seg_losses);

double vrex_total(const RiskVector& risks, double lambda, VrexBase base = VrexBase::mean);

/// d(vrex_total)/d(risk_e); backpropagating each environment's seg loss scaled
/// by this weight yields the exact objective gradient.
std::vector<double> vrex_risk_weights(const RiskVector& risks, double lambda,
                                      VrexBase base = VrexBase::mean);

double worst_env_risk(const RiskVector& risks);

double population_variance(const std::vector<double>& xs);

// ---- domain losses -----------------------------------------------------------
// domain_logits is (B, n_domains); labels are domain indices in [0, n_domains).

double domain_loss(const Tensor& domain_logits, const std::vector<int>& labels);
Tensor domain_loss_grad(const Tensor& domain_logits, const std::vector<int>& labels);

/// Mean negative log-probability over all domains; minimized (= ln n_domains)
/// exactly when every softmax row is uniform.
double confusion_loss(const Tensor& domain_logits);
Tensor confusion_loss_grad(const Tensor& domain_logits);

// ---- composite objectives ------------------------------------------------------

/// sum_e R^e + alpha * L_d + beta * L_conf.
double domain_prediction_total(const RiskVector& risks, double loss_domain,
                               double loss_confusion, double alpha, double beta);

/// lambda * Var({R^e}) + sum_e R^e + alpha * L_d + beta * L_conf.
double combined_total(const RiskVector& risks, double lambda, double loss_domain,
                      double loss_confusion, double alpha, double beta);

// ---- IRMv1 (experimental) ------------------------------------------------------
// Penalty sum_e || d/dw R^e(w * logits) |_{w=1} ||^2 through a scalar dummy
// multiplier on the logits. Shipped behind the experimental flag in the
// trainer config; not part of the evaluated methods.

double irmv1_env_grad(const Tensor& seg_logits, const Tensor& masks);
double irmv1_penalty(const std::vector<std::pair<const Tensor*, const Tensor*>>& env_batches);

} // namespace oodseg
