#include "oodseg/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "oodseg/common.hpp"

namespace oodseg {

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.same_shape(b))
        fail(Status::invalid_argument,
             std::string(who) + ": shape mismatch " + shape_string(a) + " vs " +
                 shape_string(b));
    if (a.ndim() < 1 || a.numel() == 0)
        fail(Status::invalid_argument, std::string(who) + ": empty input");
}

std::int64_t batch_of(const Tensor& t) { return t.dim(0); }

double stable_sigmoid(double z) {
    if (z >= 0) {
        const double e = std::exp(-z);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

} // namespace

std::vector<double> RiskVector::values() const {
    std::vector<double> v;
    v.reserve(risks.size());
    for (const auto& [env, r] : risks) v.push_back(r);
    return v;
}

void LossWeights::validate() const {
    if (lambda_vrex < 0 || alpha < 0 || beta < 0)
        fail(Status::invalid_config, "loss weights must be non-negative");
}

Tensor sigmoid(const Tensor& logits) {
    Tensor out = logits;
    for (double& z : out.data) z = stable_sigmoid(z);
    return out;
}

double dice_loss(const Tensor& probs, const Tensor& masks, double eps) {
    check_pair(probs, masks, "dice_loss");
    const std::int64_t b = batch_of(probs);
    const std::int64_t per = probs.numel() / b;
    double total = 0.0;
    for (std::int64_t s = 0; s < b; ++s) {
        const double* p = probs.ptr() + s * per;
        const double* y = masks.ptr() + s * per;
        double inter = 0.0, psum = 0.0, ysum = 0.0;
        for (std::int64_t i = 0; i < per; ++i) {
            inter += p[i] * y[i];
            psum += p[i];
            ysum += y[i];
        }
        total += 1.0 - (2.0 * inter + eps) / (psum + ysum + eps);
    }
    return total / static_cast<double>(b);
}

Tensor dice_loss_grad(const Tensor& probs, const Tensor& masks, double eps) {
    check_pair(probs, masks, "dice_loss_grad");
    const std::int64_t b = batch_of(probs);
    const std::int64_t per = probs.numel() / b;
    Tensor grad = Tensor::zeros(probs.dims);
    for (std::int64_t s = 0; s < b; ++s) {
        const double* p = probs.ptr() + s * per;
        const double* y = masks.ptr() + s * per;
        double inter = 0.0, psum = 0.0, ysum = 0.0;
        for (std::int64_t i = 0; i < per; ++i) {
            inter += p[i] * y[i];
            psum += p[i];
            ysum += y[i];
        }
        const double denom = psum + ysum + eps;
        const double num = 2.0 * inter + eps;
        double* g = grad.ptr() + s * per;
        for (std::int64_t i = 0; i < per; ++i)
            g[i] = -(2.0 * y[i] * denom - num) / (denom * denom) /
                   static_cast<double>(b);
    }
    return grad;
}

double bce_loss(const Tensor& logits, const Tensor& masks) {
    check_pair(logits, masks, "bce_loss");
    const std::int64_t n = logits.numel();
    const double* z = logits.ptr();
    const double* y = masks.ptr();
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        // max(z,0) - z*y + log(1 + exp(-|z|))
        total += std::max(z[i], 0.0) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
    }
    return total / static_cast<double>(n);
}

Tensor bce_loss_grad(const Tensor& logits, const Tensor& masks) {
    check_pair(logits, masks, "bce_loss_grad");
    const std::int64_t n = logits.numel();
    Tensor grad = Tensor::zeros(logits.dims);
    const double* z = logits.ptr();
    const double* y = masks.ptr();
    double* g = grad.ptr();
    for (std::int64_t i = 0; i < n; ++i)
        g[i] = (stable_sigmoid(z[i]) - y[i]) / static_cast<double>(n);
    return grad;
}

double seg_loss(const Tensor& logits, const Tensor& masks) {
    return dice_loss(sigmoid(logits), masks) + bce_loss(logits, masks);
}

Tensor seg_loss_grad(const Tensor& logits, const Tensor& masks) {
    const Tensor probs = sigmoid(logits);
    Tensor grad = dice_loss_grad(probs, masks);
    // Chain through the sigmoid, then add the BCE term.
    const std::int64_t n = logits.numel();
    double* g = grad.ptr();
    const double* p = probs.ptr();
    const double* y = masks.ptr();
    for (std::int64_t i = 0; i < n; ++i)
        g[i] = g[i] * p[i] * (1.0 - p[i]) + (p[i] - y[i]) / static_cast<double>(n);
    return grad;
}

RiskVector per_env_risks(const std::vector<std::pair<int, double>>& env_seg_losses) {
    if (env_seg_losses.empty())
        fail(Status::invalid_argument, "per_env_risks: no environments");
    RiskVector rv;
    rv.risks = env_seg_losses;
    return rv;
}

double population_variance(const std::vector<double>& xs) {
    const double n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return var / n;
}

double vrex_total(const RiskVector& risks, double lambda, VrexBase base) {
    if (risks.size() == 0) fail(Status::invalid_argument, "vrex_total: empty risks");
    const std::vector<double> r = risks.values();
    double sum = 0.0;
    for (double x : r) sum += x;
    const double base_term =
        base == VrexBase::mean ? sum / static_cast<double>(r.size()) : sum;
    if (lambda == 0.0) return base_term; // exact ERM reduction, no variance residue
    return lambda * population_variance(r) + base_term;
}

std::vector<double> vrex_risk_weights(const RiskVector& risks, double lambda,
                                      VrexBase base) {
    if (risks.size() == 0) fail(Status::invalid_argument, "vrex_risk_weights: empty");
    const std::vector<double> r = risks.values();
    const double n = static_cast<double>(r.size());
    const double base_w = base == VrexBase::mean ? 1.0 / n : 1.0;
    std::vector<double> w(r.size(), base_w);
    if (lambda == 0.0) return w;
    double mean = 0.0;
    for (double x : r) mean += x;
    mean /= n;
    for (std::size_t i = 0; i < r.size(); ++i)
        w[i] += lambda * 2.0 / n * (r[i] - mean);
    return w;
}

double worst_env_risk(const RiskVector& risks) {
    if (risks.size() == 0) fail(Status::invalid_argument, "worst_env_risk: empty");
    double worst = risks.risks[0].second;
    for (const auto& [env, r] : risks.risks) worst = std::max(worst, r);
    return worst;
}

double domain_loss(const Tensor& domain_logits, const std::vector<int>& labels) {
    if (domain_logits.ndim() != 2)
        fail(Status::invalid_argument, "domain_loss: logits must be (B, n_domains)");
    const std::int64_t b = domain_logits.dim(0);
    const std::int64_t nd = domain_logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != b)
        fail(Status::invalid_argument, "domain_loss: label count mismatch");
    double total = 0.0;
    for (std::int64_t s = 0; s < b; ++s) {
        const int y = labels[static_cast<std::size_t>(s)];
        if (y < 0 || y >= nd)
            fail(Status::invalid_argument, "domain_loss: label out of range");
        const double* z = domain_logits.ptr() + s * nd;
        double zmax = z[0];
        for (std::int64_t d = 1; d < nd; ++d) zmax = std::max(zmax, z[d]);
        double lse = 0.0;
        for (std::int64_t d = 0; d < nd; ++d) lse += std::exp(z[d] - zmax);
        total += -(z[y] - zmax - std::log(lse));
    }
    return total / static_cast<double>(b);
}

Tensor domain_loss_grad(const Tensor& domain_logits, const std::vector<int>& labels) {
    const std::int64_t b = domain_logits.dim(0);
    const std::int64_t nd = domain_logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != b)
        fail(Status::invalid_argument, "domain_loss_grad: label count mismatch");
    Tensor grad = Tensor::zeros(domain_logits.dims);
    for (std::int64_t s = 0; s < b; ++s) {
        const double* z = domain_logits.ptr() + s * nd;
        double* g = grad.ptr() + s * nd;
        double zmax = z[0];
        for (std::int64_t d = 1; d < nd; ++d) zmax = std::max(zmax, z[d]);
        double lse = 0.0;
        for (std::int64_t d = 0; d < nd; ++d) lse += std::exp(z[d] - zmax);
        for (std::int64_t d = 0; d < nd; ++d)
            g[d] = std::exp(z[d] - zmax) / lse / static_cast<double>(b);
        g[labels[static_cast<std::size_t>(s)]] -= 1.0 / static_cast<double>(b);
    }
    return grad;
}

double confusion_loss(const Tensor& domain_logits) {
    if (domain_logits.ndim() != 2 || domain_logits.dim(1) < 2)
        fail(Status::invalid_argument, "confusion_loss: logits must be (B, n>=2)");
    const std::int64_t b = domain_logits.dim(0);
    const std::int64_t nd = domain_logits.dim(1);
    double total = 0.0;
    for (std::int64_t s = 0; s < b; ++s) {
        const double* z = domain_logits.ptr() + s * nd;
        double zmax = z[0];
        for (std::int64_t d = 1; d < nd; ++d) zmax = std::max(zmax, z[d]);
        double lse = 0.0;
        for (std::int64_t d = 0; d < nd; ++d) lse += std::exp(z[d] - zmax);
        const double log_lse = std::log(lse);
        double row = 0.0;
        for (std::int64_t d = 0; d < nd; ++d) row += -(z[d] - zmax - log_lse);
        total += row / static_cast<double>(nd);
    }
    return total / static_cast<double>(b);
}

Tensor confusion_loss_grad(const Tensor& domain_logits) {
    const std::int64_t b = domain_logits.dim(0);
    const std::int64_t nd = domain_logits.dim(1);
    Tensor grad = Tensor::zeros(domain_logits.dims);
    for (std::int64_t s = 0; s < b; ++s) {
        const double* z = domain_logits.ptr() + s * nd;
        double* g = grad.ptr() + s * nd;
        double zmax = z[0];
        for (std::int64_t d = 1; d < nd; ++d) zmax = std::max(zmax, z[d]);
        double lse = 0.0;
        for (std::int64_t d = 0; d < nd; ++d) lse += std::exp(z[d] - zmax);
        // d/dz_j of mean_d(-log p_d) = p_j - 1/n per row.
        for (std::int64_t d = 0; d < nd; ++d)
            g[d] = (std::exp(z[d] - zmax) / lse - 1.0 / static_cast<double>(nd)) /
                   static_cast<double>(b);
    }
    return grad;
}

double domain_prediction_total(const RiskVector& risks, double loss_domain,
                               double loss_confusion, double alpha, double beta) {
    double sum = 0.0;
    for (const auto& [env, r] : risks.risks) sum += r;
    return sum + alpha * loss_domain + beta * loss_confusion;
}

double combined_total(const RiskVector& risks, double lambda, double loss_domain,
                      double loss_confusion, double alpha, double beta) {
    const double var = lambda == 0.0 ? 0.0 : population_variance(risks.values());
    return lambda * var +
           domain_prediction_total(risks, loss_domain, loss_confusion, alpha, beta);
}

double irmv1_env_grad(const Tensor& seg_logits, const Tensor& masks) {
    // d/dw seg_loss(w * logits) at w = 1 equals <d(loss)/d(logits), logits>.
    const Tensor grad = seg_loss_grad(seg_logits, masks);
    double acc = 0.0;
    for (std::int64_t i = 0; i < grad.numel(); ++i) acc += grad[i] * seg_logits[i];
    return acc;
}

double irmv1_penalty(
    const std::vector<std::pair<const Tensor*, const Tensor*>>& env_batches) {
    if (env_batches.empty()) fail(Status::invalid_argument, "irmv1_penalty: empty");
    double total = 0.0;
    for (const auto& [logits, masks] : env_batches) {
        const double g = irmv1_env_grad(*logits, *masks);
        total += g * g;
    }
    return total;
}

} // namespace oodseg
