#include "oodseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

namespace fs = std::filesystem;

namespace oodseg {

Method parse_method(const std::string& s) {
    if (s == "erm") return Method::erm;
    if (s == "vrex") return Method::vrex;
    if (s == "domain_prediction") return Method::domain_prediction;
    if (s == "combined") return Method::combined;
    fail(Status::invalid_config, "unknown method '" + s + "'");
}

const char* to_string(Method m) {
    switch (m) {
        case Method::erm: return "erm";
        case Method::vrex: return "vrex";
        case Method::domain_prediction: return "domain_prediction";
        case Method::combined: return "combined";
    }
    return "?";
}

bool is_domain_method(Method m) {
    return m == Method::domain_prediction || m == Method::combined;
}

void TrainConfig::validate() const {
    weights.validate();
    if (learning_rate <= 0) fail(Status::invalid_config, "learning_rate must be > 0");
    if (max_epochs < 1) fail(Status::invalid_config, "max_epochs must be >= 1");
    if (patience < 1) fail(Status::invalid_config, "patience must be >= 1");
    if (warmup_epochs < 0 || joint_epochs < 0)
        fail(Status::invalid_config, "stage lengths must be >= 0");
    if (batch_sizes.empty() && batch_budget < 1)
        fail(Status::invalid_config, "batch_budget must be >= 1");
    for (const auto& [env, b] : batch_sizes)
        if (b < 1)
            fail(Status::invalid_config,
                 "batch size for env " + std::to_string(env) + " must be >= 1");
    if (plateau_factor <= 0 || plateau_factor > 1)
        fail(Status::invalid_config, "plateau_factor must lie in (0,1]");
    if (plateau_factor < 1 && plateau_patience < 1)
        fail(Status::invalid_config, "plateau_patience must be >= 1");
    if (augment) aug.validate();
}

std::map<int, int> derive_batch_sizes(const std::map<int, int>& sizes, int budget) {
    if (sizes.empty()) fail(Status::invalid_argument, "derive_batch_sizes: no environments");
    if (budget < 1) fail(Status::invalid_argument, "derive_batch_sizes: budget must be >= 1");
    std::int64_t total = 0;
    for (const auto& [env, n] : sizes) {
        if (n < 1)
            fail(Status::invalid_argument, "derive_batch_sizes: empty environment " +
                                               std::to_string(env));
        total += n;
    }
    // Largest-remainder apportionment of the budget, then a floor of 1.
    std::map<int, int> out;
    std::vector<std::pair<double, int>> fractions; // (-fraction, env) for stable sort
    int assigned = 0;
    for (const auto& [env, n] : sizes) {
        const double quota = static_cast<double>(budget) * n / static_cast<double>(total);
        const int base = static_cast<int>(quota);
        out[env] = base;
        assigned += base;
        fractions.push_back({-(quota - base), env});
    }
    std::sort(fractions.begin(), fractions.end());
    for (int i = 0; i < budget - assigned && i < static_cast<int>(fractions.size()); ++i)
        out[fractions[static_cast<std::size_t>(i)].second] += 1;
    for (auto& [env, b] : out) b = std::max(1, b);
    return out;
}

BatchLayout make_env_batches(const SplitPlan& plan, int fold, const TrainConfig& cfg) {
    if (fold < 1 || fold > plan.k)
        fail(Status::invalid_argument, "fold " + std::to_string(fold) + " outside 1.." +
                                           std::to_string(plan.k));
    std::map<int, int> seg_sizes, dp_sizes;
    for (const auto& env : plan.envs) {
        const FoldSplit& f = env.folds[static_cast<std::size_t>(fold - 1)];
        if (!f.seg_train.empty()) seg_sizes[env.env_id] = static_cast<int>(f.seg_train.size());
        if (!f.dp_train.empty()) dp_sizes[env.env_id] = static_cast<int>(f.dp_train.size());
    }
    if (seg_sizes.empty())
        fail(Status::invalid_config, "make_env_batches: no labeled training samples in fold " +
                                         std::to_string(fold));

    BatchLayout layout;
    if (!cfg.batch_sizes.empty()) {
        for (const auto& [env, n] : seg_sizes) {
            auto it = cfg.batch_sizes.find(env);
            if (it == cfg.batch_sizes.end())
                fail(Status::invalid_config, "make_env_batches: no batch size for env " +
                                                 std::to_string(env));
            layout.seg_batch[env] = it->second;
        }
        for (const auto& [env, n] : dp_sizes) {
            auto it = cfg.batch_sizes.find(env);
            layout.dp_batch[env] = it == cfg.batch_sizes.end() ? 1 : it->second;
        }
    } else {
        layout.seg_batch = derive_batch_sizes(seg_sizes, cfg.batch_budget);
        layout.dp_batch = derive_batch_sizes(dp_sizes, cfg.batch_budget);
    }
    int steps = 0;
    for (const auto& [env, n] : seg_sizes) {
        const int b = layout.seg_batch.at(env);
        steps = std::max(steps, (n + b - 1) / b);
    }
    layout.steps_per_epoch = steps;
    return layout;
}

std::vector<std::string> step_batch_ids(const std::vector<std::string>& pool, int batch,
                                        std::uint64_t seed, const char* purpose,
                                        int env_id, int epoch, int step) {
    if (pool.empty() || batch < 1) return {};
    std::vector<std::string> shuffled = pool;
    StreamRng rng = StreamRng::keyed(seed, purpose, static_cast<std::uint64_t>(env_id),
                                     static_cast<std::uint64_t>(epoch));
    rng.shuffle(shuffled);
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(batch));
    const std::size_t n = shuffled.size();
    for (int j = 0; j < batch; ++j)
        out.push_back(shuffled[(static_cast<std::size_t>(step) * batch + j) % n]);
    return out;
}

// ---- epoch record serialization ---------------------------------------------

namespace {

std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

std::string format_epoch_record(const EpochRecord& rec) {
    std::ostringstream os;
    os << "epoch=" << rec.epoch << " phase=" << rec.phase << " lr=" << fmt_g(rec.lr)
       << " total=" << fmt_g(rec.total) << " risk_mean=" << fmt_g(rec.risk_mean)
       << " risk_var=" << fmt_g(rec.risk_var);
    for (const auto& [env, v] : rec.env_risk) os << " risk_e" << env << "=" << fmt_g(v);
    for (const auto& [env, v] : rec.seg_gnorm) os << " sgn_e" << env << "=" << fmt_g(v);
    for (const auto& [env, v] : rec.dp_seen) os << " dpn_e" << env << "=" << v;
    if (std::isfinite(rec.domain_loss_value)) os << " ld=" << fmt_g(rec.domain_loss_value);
    if (std::isfinite(rec.confusion_value)) os << " lconf=" << fmt_g(rec.confusion_value);
    if (std::isfinite(rec.irmv1)) os << " irm=" << fmt_g(rec.irmv1);
    if (std::isfinite(rec.val_dice)) os << " val_dice=" << fmt_g(rec.val_dice);
    for (const auto& [env, v] : rec.val_env_dice) os << " vd_e" << env << "=" << fmt_g(v);
    if (std::isfinite(rec.val_domacc)) os << " val_domacc=" << fmt_g(rec.val_domacc);
    return os.str();
}

EpochRecord parse_epoch_record(const std::string& line) {
    EpochRecord rec;
    std::istringstream is(line);
    std::string token;
    auto env_of = [](const std::string& key, std::size_t prefix) {
        return std::stoi(key.substr(prefix));
    };
    while (is >> token) {
        const std::size_t eq = token.find('=');
        if (eq == std::string::npos)
            fail(Status::io_error, "bad epoch record token '" + token + "'");
        const std::string key = token.substr(0, eq);
        const std::string value = token.substr(eq + 1);
        if (key == "epoch")
            rec.epoch = std::stoi(value);
        else if (key == "phase")
            rec.phase = value;
        else if (key == "lr")
            rec.lr = std::stod(value);
        else if (key == "total")
            rec.total = std::stod(value);
        else if (key == "risk_mean")
            rec.risk_mean = std::stod(value);
        else if (key == "risk_var")
            rec.risk_var = std::stod(value);
        else if (key.rfind("risk_e", 0) == 0)
            rec.env_risk.emplace_back(env_of(key, 6), std::stod(value));
        else if (key.rfind("sgn_e", 0) == 0)
            rec.seg_gnorm.emplace_back(env_of(key, 5), std::stod(value));
        else if (key.rfind("dpn_e", 0) == 0)
            rec.dp_seen.emplace_back(env_of(key, 5), std::stoi(value));
        else if (key == "ld")
            rec.domain_loss_value = std::stod(value);
        else if (key == "lconf")
            rec.confusion_value = std::stod(value);
        else if (key == "irm")
            rec.irmv1 = std::stod(value);
        else if (key == "val_dice")
            rec.val_dice = std::stod(value);
        else if (key.rfind("vd_e", 0) == 0)
            rec.val_env_dice.emplace_back(env_of(key, 4), std::stod(value));
        else if (key == "val_domacc")
            rec.val_domacc = std::stod(value);
        else
            fail(Status::io_error, "unknown epoch record key '" + key + "'");
    }
    if (rec.epoch < 1) fail(Status::io_error, "epoch record without epoch number");
    return rec;
}

// ---- data preparation ---------------------------------------------------------

namespace {

struct PreparedEnv {
    int env_id = 0;
    std::string name;
    std::vector<Sample> samples; // volumes z-scored
    std::map<std::string, std::size_t> index;

    const Sample& get(const std::string& id) const {
        auto it = index.find(id);
        if (it == index.end())
            fail(Status::invalid_argument, "sample id " + id + " not found in env " +
                                               std::to_string(env_id));
        return samples[it->second];
    }
};

struct Prepared {
    std::map<int, PreparedEnv> envs;
    Shape3 shape;
};

Prepared prepare_data(const std::vector<EnvironmentDataset>& data) {
    if (data.empty()) fail(Status::invalid_argument, "no environments");
    Prepared prep;
    prep.shape = data.front().samples.empty() ? Shape3{}
                                              : data.front().samples.front().volume.shape;
    for (const auto& env : data) {
        PreparedEnv pe;
        pe.env_id = env.env_id;
        pe.name = env.name;
        for (const auto& s : env.samples) {
            if (prep.shape.numel() == 0) prep.shape = s.volume.shape;
            if (!(s.volume.shape == prep.shape))
                fail(Status::invalid_argument,
                     "sample " + s.sample_id + " shape " + to_string(s.volume.shape) +
                         " differs from " + to_string(prep.shape));
            Sample copy = s;
            zscore_normalize(copy.volume);
            pe.index[copy.sample_id] = pe.samples.size();
            pe.samples.push_back(std::move(copy));
        }
        prep.envs[env.env_id] = std::move(pe);
    }
    return prep;
}

void copy_volume_into(const Volume& v, Tensor& images, std::int64_t slot) {
    std::memcpy(images.ptr() + slot * v.shape.numel(), v.voxels.data(),
                static_cast<std::size_t>(v.shape.numel()) * sizeof(double));
}

void copy_mask_into(const LabelMask& m, Tensor& masks, std::int64_t slot) {
    double* dst = masks.ptr() + slot * m.shape.numel();
    for (std::int64_t i = 0; i < m.shape.numel(); ++i)
        dst[i] = m.voxels[static_cast<std::size_t>(i)];
}

/// Assembles (B,1,Z,Y,X) image (and optionally mask) tensors for a list of
/// ids, applying per-sample augmentation keyed by (seed, tag, epoch, env,
/// step, slot) so draws are independent of evaluation order.
void assemble_batch(const PreparedEnv& env, const std::vector<std::string>& ids,
                    const Shape3& shape, const TrainConfig& cfg, const char* aug_tag,
                    int epoch, int step, Tensor& images, Tensor* masks) {
    const std::int64_t b = static_cast<std::int64_t>(ids.size());
    images = Tensor({b, 1, shape.d, shape.h, shape.w});
    if (masks) *masks = Tensor({b, 1, shape.d, shape.h, shape.w});
    for (std::int64_t j = 0; j < b; ++j) {
        const Sample& s = env.get(ids[static_cast<std::size_t>(j)]);
        if (masks && !s.labeled())
            fail(Status::invalid_argument,
                 "sample " + s.sample_id + " is unlabeled but a mask was requested");
        if (cfg.augment) {
            StreamRng rng = StreamRng::keyed(
                cfg.seed, aug_tag, static_cast<std::uint64_t>(epoch),
                (static_cast<std::uint64_t>(static_cast<std::uint32_t>(env.env_id)) << 32) |
                    static_cast<std::uint32_t>(step),
                static_cast<std::uint64_t>(j));
            Sample aug = augment(s, cfg.aug, rng);
            copy_volume_into(aug.volume, images, j);
            if (masks) copy_mask_into(*aug.mask, *masks, j);
        } else {
            copy_volume_into(s.volume, images, j);
            if (masks) copy_mask_into(*s.mask, *masks, j);
        }
    }
}

// ---- Adam -------------------------------------------------------------------

constexpr char kOptMagic[8] = {'O', 'O', 'D', 'O', 'P', 'T', '1', '\0'};

class Adam {
  public:
    Adam(const UNet3D& model, const TrainConfig& cfg)
        : lr_(cfg.learning_rate), b1_(cfg.adam_beta1), b2_(cfg.adam_beta2),
          eps_(cfg.adam_eps) {
        for (const auto& p : model.params()) {
            m_.push_back(Tensor::zeros(p.value.dims));
            v_.push_back(Tensor::zeros(p.value.dims));
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

    void step(UNet3D& model, const GradBuffer& grads, const std::array<bool, 3>& groups) {
        for (int g = 0; g < 3; ++g)
            if (groups[static_cast<std::size_t>(g)])
                ++t_[static_cast<std::size_t>(g)];
        auto& params = model.params();
        for (std::size_t i = 0; i < params.size(); ++i) {
            const int g = static_cast<int>(params[i].group);
            if (!groups[static_cast<std::size_t>(g)]) continue;
            const std::int64_t t = t_[static_cast<std::size_t>(g)];
            const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t));
            double* p = params[i].value.ptr();
            double* m = m_[i].ptr();
            double* v = v_[i].ptr();
            const double* gr = grads.grads[i].ptr();
            const std::int64_t n = params[i].value.numel();
            for (std::int64_t k = 0; k < n; ++k) {
                m[k] = b1_ * m[k] + (1.0 - b1_) * gr[k];
                v[k] = b2_ * v[k] + (1.0 - b2_) * gr[k] * gr[k];
                const double mhat = m[k] / bc1;
                const double vhat = v[k] / bc2;
                p[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void save(const std::string& path, int epoch) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) fail(Status::io_error, path + ": cannot open for writing");
        os.write(kOptMagic, 8);
        const std::int64_t ep = epoch;
        os.write(reinterpret_cast<const char*>(&ep), sizeof(ep));
        os.write(reinterpret_cast<const char*>(&lr_), sizeof(lr_));
        os.write(reinterpret_cast<const char*>(t_.data()), sizeof(t_));
        for (const auto& t : m_)
            os.write(reinterpret_cast<const char*>(t.ptr()),
                     static_cast<std::streamsize>(t.numel() * sizeof(double)));
        for (const auto& t : v_)
            os.write(reinterpret_cast<const char*>(t.ptr()),
                     static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!os) fail(Status::io_error, path + ": write failed");
    }

    int load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) fail(Status::io_error, path + ": cannot open");
        char magic[8];
        is.read(magic, 8);
        if (!is || std::memcmp(magic, kOptMagic, 8) != 0)
            fail(Status::io_error, path + ": bad optimizer-state magic");
        std::int64_t epoch = 0;
        is.read(reinterpret_cast<char*>(&epoch), sizeof(epoch));
        is.read(reinterpret_cast<char*>(&lr_), sizeof(lr_));
        is.read(reinterpret_cast<char*>(t_.data()), sizeof(t_));
        for (auto& t : m_)
            is.read(reinterpret_cast<char*>(t.ptr()),
                    static_cast<std::streamsize>(t.numel() * sizeof(double)));
        for (auto& t : v_)
            is.read(reinterpret_cast<char*>(t.ptr()),
                    static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!is) fail(Status::io_error, path + ": truncated optimizer state");
        return static_cast<int>(epoch);
    }

  private:
    double lr_, b1_, b2_, eps_;
    std::vector<Tensor> m_, v_;
    std::array<std::int64_t, 3> t_ = {0, 0, 0};
};

// ---- schedule helpers ----------------------------------------------------------

std::string phase_of(Method m, const TrainConfig& cfg, int epoch) {
    if (!is_domain_method(m)) return "main";
    if (epoch <= cfg.warmup_epochs) return "warmup";
    if (epoch <= cfg.warmup_epochs + cfg.joint_epochs) return "joint";
    return "adversarial";
}

/// Epoch from which validation tracking (best checkpoint, early stop) is
/// active. Domain methods only track once the adversarial stage has begun;
/// checkpoints from the harmonization stages are not candidates.
int tracking_start(Method m, const TrainConfig& cfg) {
    return is_domain_method(m) ? cfg.warmup_epochs + cfg.joint_epochs + 1 : 1;
}

struct Tracking {
    double best = -1.0;
    int best_epoch = 0;
    int since = 0;
    double lr = 0.0;
};

Tracking replay_tracking(const std::vector<EpochRecord>& history, const TrainConfig& cfg,
                         int window_start) {
    Tracking t;
    t.lr = cfg.learning_rate;
    for (const auto& rec : history) {
        if (rec.epoch < window_start || !std::isfinite(rec.val_dice)) continue;
        if (rec.val_dice > t.best) {
            t.best = rec.val_dice;
            t.best_epoch = rec.epoch;
            t.since = 0;
        } else {
            ++t.since;
            if (cfg.plateau_factor < 1.0 && t.since % cfg.plateau_patience == 0)
                t.lr *= cfg.plateau_factor;
        }
    }
    return t;
}

std::uint64_t train_run_hash(const TrainConfig& cfg, const ArchConfig& arch, int fold) {
    std::ostringstream os;
    os << to_string(cfg.method) << "|" << fmt_g(cfg.weights.lambda_vrex) << "|"
       << fmt_g(cfg.weights.alpha) << "|" << fmt_g(cfg.weights.beta) << "|"
       << (cfg.vrex_base == VrexBase::mean ? "mean" : "sum") << "|"
       << fmt_g(cfg.learning_rate) << "|" << fmt_g(cfg.adam_beta1) << "|"
       << fmt_g(cfg.adam_beta2) << "|" << fmt_g(cfg.adam_eps) << "|";
    for (const auto& [env, b] : cfg.batch_sizes) os << env << ":" << b << ",";
    os << "|" << cfg.batch_budget << "|" << cfg.max_epochs << "|" << cfg.patience << "|"
       << cfg.warmup_epochs << "|" << cfg.joint_epochs << "|" << fmt_g(cfg.plateau_factor)
       << "|" << cfg.plateau_patience << "|" << cfg.augment << "|" << cfg.seed << "|"
       << arch.in_channels << "," << arch.levels << "," << arch.base_channels << ","
       << arch.n_domains << "," << to_string(arch.input_shape) << "|" << fold;
    return hash_string(os.str());
}

struct EnvStage1 {
    int env_id = 0;
    UNetTrace trace;
    Tensor logits;
    Tensor masks;
};

} // namespace

std::map<int, int> domain_index_map(const SplitPlan& plan, int fold) {
    std::vector<int> train_envs;
    for (const auto& env : plan.envs)
        if (!env.folds[static_cast<std::size_t>(fold - 1)].dp_train.empty())
            train_envs.push_back(env.env_id);
    std::sort(train_envs.begin(), train_envs.end());
    std::map<int, int> out;
    for (std::size_t i = 0; i < train_envs.size(); ++i)
        out[train_envs[i]] = static_cast<int>(i);
    return out;
}

LabelMask predict_mask(const Tensor& seg_logits, std::int64_t sample_index,
                       const Shape3& shape) {
    LabelMask m;
    m.shape = shape;
    m.voxels.resize(static_cast<std::size_t>(shape.numel()));
    const double* z = seg_logits.ptr() + sample_index * shape.numel();
    for (std::int64_t i = 0; i < shape.numel(); ++i)
        m.voxels[static_cast<std::size_t>(i)] = z[i] > 0.0 ? 1 : 0; // sigmoid(z) > 0.5
    return m;
}

namespace {

ValMetrics validate_prepared(const UNet3D& model, const Prepared& prep,
                             const SplitPlan& plan, int fold) {
    ValMetrics out;
    const Shape3 shape = model.config().input_shape;
    std::vector<double> env_means;
    for (const auto& env : plan.envs) {
        const FoldSplit& f = env.env_id >= 0
                                 ? plan.env(env.env_id).folds[static_cast<std::size_t>(fold - 1)]
                                 : env.folds[static_cast<std::size_t>(fold - 1)];
        if (f.seg_val.empty()) continue;
        const PreparedEnv& pe = prep.envs.at(env.env_id);
        double acc = 0.0;
        for (const auto& id : f.seg_val) {
            const Sample& s = pe.get(id);
            Tensor images({1, 1, shape.d, shape.h, shape.w});
            copy_volume_into(s.volume, images, 0);
            UNetTrace trace;
            model.forward_features(images, trace);
            const Tensor logits = model.forward_segment(trace.features);
            acc += dice_score(predict_mask(logits, 0, shape), *s.mask);
        }
        const double mean = acc / static_cast<double>(f.seg_val.size());
        out.env_dice.emplace_back(env.env_id, mean);
        env_means.push_back(mean);
    }
    if (!env_means.empty()) {
        double m = 0.0;
        for (double v : env_means) m += v;
        out.mean_dice = m / static_cast<double>(env_means.size());
    }

    const std::map<int, int> dmap = domain_index_map(plan, fold);
    if (dmap.size() >= 2) {
        std::int64_t correct = 0, total = 0;
        for (const auto& [env_id, domain] : dmap) {
            const FoldSplit& f = plan.env(env_id).folds[static_cast<std::size_t>(fold - 1)];
            if (f.dp_val.empty()) continue;
            const PreparedEnv& pe = prep.envs.at(env_id);
            // Evaluate in small batches to bound memory.
            for (std::size_t at = 0; at < f.dp_val.size(); at += 8) {
                const std::size_t nb = std::min<std::size_t>(8, f.dp_val.size() - at);
                Tensor images({static_cast<std::int64_t>(nb), 1, shape.d, shape.h, shape.w});
                std::vector<int> labels(nb, domain);
                for (std::size_t j = 0; j < nb; ++j)
                    copy_volume_into(pe.get(f.dp_val[at + j]).volume, images,
                                     static_cast<std::int64_t>(j));
                UNetTrace trace;
                model.forward_features(images, trace);
                DomainTrace dtrace;
                const Tensor logits = model.forward_domain(trace.features, dtrace);
                const double acc = domain_accuracy(logits, labels);
                correct += static_cast<std::int64_t>(
                    std::llround(acc / 100.0 * static_cast<double>(nb)));
                total += static_cast<std::int64_t>(nb);
            }
        }
        if (total > 0)
            out.domain_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(total);
    }
    return out;
}

void check_finite(double v, const char* what, int epoch, int step) {
    if (!std::isfinite(v))
        fail(Status::divergence, std::string(what) + " became non-finite at epoch " +
                                     std::to_string(epoch) + " step " +
                                     std::to_string(step) + "; training aborted");
}

} // namespace

ValMetrics validate_model(const UNet3D& model, const std::vector<EnvironmentDataset>& data,
                          const SplitPlan& plan, int fold) {
    const Prepared prep = prepare_data(data);
    return validate_prepared(model, prep, plan, fold);
}

TrainState train(const std::vector<EnvironmentDataset>& data, const SplitPlan& plan,
                 int fold, const TrainConfig& cfg, const ArchConfig& arch,
                 const std::string& run_dir) {
    cfg.validate();
    if (fold < 1 || fold > plan.k)
        fail(Status::invalid_argument, "fold " + std::to_string(fold) + " outside 1.." +
                                           std::to_string(plan.k));
    const Method method = cfg.method;
    const std::map<int, int> dmap = domain_index_map(plan, fold);
    if (is_domain_method(method) && dmap.size() < 2)
        fail(Status::invalid_config,
             std::string(to_string(method)) + " requires at least 2 training environments");

    ArchConfig net_cfg = arch;
    net_cfg.n_domains = std::max<int>(2, static_cast<int>(dmap.size()));
    const Prepared prep = prepare_data(data);
    if (!(prep.shape == net_cfg.input_shape))
        fail(Status::invalid_config, "data shape " + to_string(prep.shape) +
                                         " does not match configured input shape " +
                                         to_string(net_cfg.input_shape));
    const BatchLayout layout = make_env_batches(plan, fold, cfg);

    // Per-env id pools for this fold.
    std::map<int, std::vector<std::string>> seg_pool, dp_pool;
    for (const auto& env : plan.envs) {
        const FoldSplit& f = env.folds[static_cast<std::size_t>(fold - 1)];
        if (!f.seg_train.empty()) seg_pool[env.env_id] = f.seg_train;
        if (!f.dp_train.empty()) dp_pool[env.env_id] = f.dp_train;
    }
    if (method == Method::vrex && seg_pool.size() < 2)
        fail(Status::invalid_config, "vrex requires at least 2 environments with labeled data");

    TrainState state(UNet3D(net_cfg, cfg.seed));
    Adam adam(state.model, cfg);
    const std::uint64_t run_hash = train_run_hash(cfg, net_cfg, fold);

    const fs::path dir = run_dir;
    const std::string log_path = run_dir.empty() ? "" : (dir / "log.txt").string();
    const std::string last_path = run_dir.empty() ? "" : (dir / "last.ckpt").string();
    const std::string best_path = run_dir.empty() ? "" : (dir / "best.ckpt").string();
    const std::string opt_path = run_dir.empty() ? "" : (dir / "optim.bin").string();

    int start_epoch = 1;
    std::vector<Tensor> best_values; // in-memory copy of the best parameters

    if (!run_dir.empty()) {
        fs::create_directories(dir);
        if (fs::exists(log_path) && fs::exists(last_path) && fs::exists(opt_path)) {
            // Resume: the keyed RNG scheme makes the continuation bit-identical
            // to an uninterrupted run.
            std::ifstream is(log_path);
            std::string line;
            if (!std::getline(is, line) ||
                line != "OODLOG1 hash=" + std::to_string(run_hash))
                fail(Status::invalid_config,
                     run_dir + ": existing log belongs to a different run configuration");
            while (std::getline(is, line))
                if (!line.empty()) state.history.push_back(parse_epoch_record(line));
            UNet3D loaded = UNet3D::load_checkpoint(last_path);
            if (!(loaded.config() == net_cfg))
                fail(Status::invalid_config, run_dir + ": checkpoint architecture mismatch");
            state.model = std::move(loaded);
            const int opt_epoch = adam.load(opt_path);
            if (state.history.empty() ||
                state.history.back().epoch != opt_epoch)
                fail(Status::io_error,
                     run_dir + ": log and optimizer state disagree; remove the run "
                               "directory to restart");
            start_epoch = opt_epoch + 1;
            if (fs::exists(best_path)) {
                UNet3D best = UNet3D::load_checkpoint(best_path);
                for (const auto& p : best.params()) best_values.push_back(p.value);
            }
        } else {
            std::ofstream os(log_path, std::ios::trunc);
            os << "OODLOG1 hash=" << run_hash << "\n";
        }
    }

    const int window_start = tracking_start(method, cfg);
    Tracking track = replay_tracking(state.history, cfg, window_start);
    adam.set_lr(track.lr);
    const bool stopped_already =
        !state.history.empty() && track.since >= cfg.patience;

    for (int epoch = start_epoch;
         epoch <= cfg.max_epochs && !(stopped_already && epoch == start_epoch);
         ++epoch) {
        const std::string phase = phase_of(method, cfg, epoch);
        const bool do_dp = is_domain_method(method) && phase != "warmup";
        const bool do_conf = is_domain_method(method) && phase == "adversarial";

        EpochRecord rec;
        rec.epoch = epoch;
        rec.phase = phase;
        rec.lr = adam.lr();
        std::map<int, double> risk_acc, sgn_acc;
        std::map<int, int> dp_count;
        for (const auto& [env_id, domain] : dmap) {
            sgn_acc[env_id] = 0.0;
            if (do_dp) dp_count[env_id] = 0;
        }
        double total_acc = 0.0, risk_mean_acc = 0.0, risk_var_acc = 0.0;
        double ld_acc = 0.0, lconf_acc = 0.0, irm_acc = 0.0;

        for (int step = 0; step < layout.steps_per_epoch; ++step) {
            // Stage 1: segmentation update on {repr, seg}.
            std::vector<EnvStage1> stage1;
            RiskVector risks;
            for (const auto& [env_id, pool] : seg_pool) {
                EnvStage1 es;
                es.env_id = env_id;
                const auto ids = step_batch_ids(pool, layout.seg_batch.at(env_id), cfg.seed,
                                                "seg", env_id, epoch, step);
                Tensor images;
                assemble_batch(prep.envs.at(env_id), ids, prep.shape, cfg, "aug-seg", epoch,
                               step, images, &es.masks);
                state.model.forward_features(images, es.trace);
                es.logits = state.model.forward_segment(es.trace.features);
                const double risk = seg_loss(es.logits, es.masks);
                check_finite(risk, "segmentation risk", epoch, step);
                risks.risks.emplace_back(env_id, risk);
                if (cfg.log_irmv1) {
                    const double g = irmv1_env_grad(es.logits, es.masks);
                    irm_acc += g * g;
                }
                stage1.push_back(std::move(es));
            }

            std::vector<double> w;
            double step_total = 0.0;
            switch (method) {
                case Method::erm:
                    w = vrex_risk_weights(risks, 0.0, VrexBase::mean);
                    step_total = vrex_total(risks, 0.0, VrexBase::mean);
                    break;
                case Method::vrex:
                    w = vrex_risk_weights(risks, cfg.weights.lambda_vrex, cfg.vrex_base);
                    step_total = vrex_total(risks, cfg.weights.lambda_vrex, cfg.vrex_base);
                    break;
                case Method::domain_prediction:
                    w = vrex_risk_weights(risks, 0.0, VrexBase::sum);
                    step_total = vrex_total(risks, 0.0, VrexBase::sum);
                    break;
                case Method::combined:
                    w = vrex_risk_weights(risks, cfg.weights.lambda_vrex, VrexBase::sum);
                    step_total = vrex_total(risks, cfg.weights.lambda_vrex, VrexBase::sum);
                    break;
            }

            GradBuffer g1 = state.model.make_grad_buffer({true, true, false});
            const auto& params = state.model.params();
            for (std::size_t e = 0; e < stage1.size(); ++e) {
                EnvStage1& es = stage1[e];
                Tensor dlogits = seg_loss_grad(es.logits, es.masks);
                for (double& x : dlogits.data) x *= w[e];
                const double before = g1.group_sq_norm(ParamGroup::seg, params);
                state.model.backward_segment(dlogits, es.trace, g1);
                // Additive accumulation: the difference is this env's share.
                sgn_acc[es.env_id] +=
                    std::sqrt(std::max(0.0, g1.group_sq_norm(ParamGroup::seg, params) - before));
            }
            adam.step(state.model, g1, {true, true, false});

            double step_ld = 0.0, step_lconf = 0.0;
            if (do_dp) {
                // Stage 2: domain-predictor update on {dp}, trunk frozen.
                std::vector<std::string> all_ids;
                std::vector<int> labels;
                std::vector<const PreparedEnv*> envs_of;
                for (const auto& [env_id, pool] : dp_pool) {
                    const auto ids = step_batch_ids(pool, layout.dp_batch.at(env_id),
                                                    cfg.seed, "dp", env_id, epoch, step);
                    for (const auto& id : ids) {
                        all_ids.push_back(id);
                        labels.push_back(dmap.at(env_id));
                        envs_of.push_back(&prep.envs.at(env_id));
                    }
                    dp_count[env_id] += static_cast<int>(ids.size());
                }
                Tensor images({static_cast<std::int64_t>(all_ids.size()), 1, prep.shape.d,
                               prep.shape.h, prep.shape.w});
                for (std::size_t j = 0; j < all_ids.size(); ++j) {
                    const Sample& s = envs_of[j]->get(all_ids[j]);
                    if (cfg.augment) {
                        StreamRng rng = StreamRng::keyed(
                            cfg.seed, "aug-dp", static_cast<std::uint64_t>(epoch),
                            static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(j));
                        const Sample aug = augment(s, cfg.aug, rng);
                        copy_volume_into(aug.volume, images, static_cast<std::int64_t>(j));
                    } else {
                        copy_volume_into(s.volume, images, static_cast<std::int64_t>(j));
                    }
                }
                UNetTrace trunk;
                state.model.forward_features(images, trunk);
                DomainTrace dt;
                Tensor dom_logits = state.model.forward_domain(trunk.features, dt);
                step_ld = domain_loss(dom_logits, labels);
                check_finite(step_ld, "domain loss", epoch, step);
                GradBuffer g2 = state.model.make_grad_buffer({false, false, true});
                Tensor dld = domain_loss_grad(dom_logits, labels);
                for (double& x : dld.data) x *= cfg.weights.alpha;
                state.model.backward_domain(dld, trunk, dt, g2);
                adam.step(state.model, g2, {false, false, true});

                if (do_conf) {
                    // Stage 3: confusion update on {repr}, domain head frozen.
                    // The trunk is unchanged by stage 2, so its features and
                    // trace stay valid; only the dp head is re-run.
                    DomainTrace dt3;
                    Tensor conf_logits = state.model.forward_domain(trunk.features, dt3);
                    step_lconf = confusion_loss(conf_logits);
                    check_finite(step_lconf, "confusion loss", epoch, step);
                    GradBuffer g3 = state.model.make_grad_buffer({true, false, false});
                    Tensor dlc = confusion_loss_grad(conf_logits);
                    for (double& x : dlc.data) x *= cfg.weights.beta;
                    state.model.backward_domain(dlc, trunk, dt3, g3);
                    adam.step(state.model, g3, {true, false, false});
                }
            }

            for (const auto& [env_id, r] : risks.risks) risk_acc[env_id] += r;
            const std::vector<double> rv = risks.values();
            double rmean = 0.0;
            for (double r : rv) rmean += r;
            rmean /= static_cast<double>(rv.size());
            risk_mean_acc += rmean;
            risk_var_acc += population_variance(rv);
            total_acc += step_total + (do_dp ? cfg.weights.alpha * step_ld : 0.0) +
                         (do_conf ? cfg.weights.beta * step_lconf : 0.0);
            ld_acc += step_ld;
            lconf_acc += step_lconf;
        }

        const double inv_steps = 1.0 / static_cast<double>(layout.steps_per_epoch);
        rec.total = total_acc * inv_steps;
        rec.risk_mean = risk_mean_acc * inv_steps;
        rec.risk_var = risk_var_acc * inv_steps;
        for (const auto& [env_id, acc] : risk_acc)
            rec.env_risk.emplace_back(env_id, acc * inv_steps);
        for (const auto& [env_id, acc] : sgn_acc)
            rec.seg_gnorm.emplace_back(env_id, acc * inv_steps);
        for (const auto& [env_id, n] : dp_count) rec.dp_seen.emplace_back(env_id, n);
        if (do_dp) rec.domain_loss_value = ld_acc * inv_steps;
        if (do_conf) rec.confusion_value = lconf_acc * inv_steps;
        if (cfg.log_irmv1)
            rec.irmv1 = irm_acc * inv_steps;

        const ValMetrics vm = validate_prepared(state.model, prep, plan, fold);
        rec.val_dice = vm.mean_dice;
        rec.val_env_dice = vm.env_dice;
        rec.val_domacc = vm.domain_acc;

        state.history.push_back(rec);
        state.epoch = epoch;

        const Tracking prev = track;
        track = replay_tracking(state.history, cfg, window_start);
        adam.set_lr(track.lr);
        if (track.best_epoch == epoch) {
            best_values.clear();
            for (const auto& p : state.model.params()) best_values.push_back(p.value);
            if (!run_dir.empty()) state.model.save_checkpoint(best_path);
        }
        (void)prev;

        if (!run_dir.empty()) {
            std::ofstream os(log_path, std::ios::app);
            os << format_epoch_record(rec) << "\n";
            os.flush();
            state.model.save_checkpoint(last_path);
            adam.save(opt_path, epoch);
        }
        if (track.since >= cfg.patience) break;
    }

    state.best_val_score = track.best;
    state.best_epoch = track.best_epoch;
    state.epochs_since_improvement = track.since;
    if (!state.history.empty()) state.epoch = state.history.back().epoch;

    // Restore the best-validation parameters.
    if (track.best_epoch > 0 && !best_values.empty()) {
        auto& params = state.model.params();
        for (std::size_t i = 0; i < params.size(); ++i) params[i].value = best_values[i];
    }
    return state;
}

namespace {

TrainState train_with_method(Method expected, const std::vector<EnvironmentDataset>& data,
                             const SplitPlan& plan, int fold, const TrainConfig& cfg,
                             const ArchConfig& arch, const std::string& run_dir) {
    if (cfg.method != expected)
        fail(Status::invalid_config, std::string("config method is ") +
                                         to_string(cfg.method) + ", expected " +
                                         to_string(expected));
    return train(data, plan, fold, cfg, arch, run_dir);
}

} // namespace

TrainState train_erm(const std::vector<EnvironmentDataset>& data, const SplitPlan& plan,
                     int fold, const TrainConfig& cfg, const ArchConfig& arch,
                     const std::string& run_dir) {
    return train_with_method(Method::erm, data, plan, fold, cfg, arch, run_dir);
}

TrainState train_vrex(const std::vector<EnvironmentDataset>& data, const SplitPlan& plan,
                      int fold, const TrainConfig& cfg, const ArchConfig& arch,
                      const std::string& run_dir) {
    return train_with_method(Method::vrex, data, plan, fold, cfg, arch, run_dir);
}

TrainState train_domain_prediction(const std::vector<EnvironmentDataset>& data,
                                   const SplitPlan& plan, int fold, const TrainConfig& cfg,
                                   const ArchConfig& arch, const std::string& run_dir) {
    return train_with_method(Method::domain_prediction, data, plan, fold, cfg, arch,
                             run_dir);
}

TrainState train_combined(const std::vector<EnvironmentDataset>& data,
                          const SplitPlan& plan, int fold, const TrainConfig& cfg,
                          const ArchConfig& arch, const std::string& run_dir) {
    return train_with_method(Method::combined, data, plan, fold, cfg, arch, run_dir);
}

} // namespace oodseg
