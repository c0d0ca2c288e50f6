#include "oodseg/splits.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "oodseg/rng.hpp"

namespace oodseg {

bool EnvSplit::is_labeled(const std::string& id) const {
    for (const auto& [rid, labeled] : roster)
        if (rid == id) return labeled;
    fail(Status::invalid_argument, "unknown sample id " + id + " in env " +
                                       std::to_string(env_id));
}

const EnvSplit& SplitPlan::env(int env_id) const {
    for (const auto& e : envs)
        if (e.env_id == env_id) return e;
    fail(Status::invalid_argument, "plan has no environment " + std::to_string(env_id));
}

SplitPlan make_folds(const std::vector<EnvRoster>& envs, int k, double val_fraction,
                     std::optional<int> ood_env, std::uint64_t seed) {
    if (k < 2) fail(Status::invalid_config, "make_folds: K must be >= 2");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        fail(Status::invalid_config, "make_folds: val_fraction must lie in (0,1)");
    if (ood_env) {
        bool found = false;
        for (const auto& e : envs) found |= e.env_id == *ood_env;
        if (!found)
            fail(Status::invalid_config,
                 "make_folds: ood_env " + std::to_string(*ood_env) + " not present");
    }

    SplitPlan plan;
    plan.k = k;
    plan.val_fraction = val_fraction;
    plan.seed = seed;
    plan.ood_env = ood_env;

    for (const auto& env : envs) {
        EnvSplit es;
        es.env_id = env.env_id;
        es.name = env.name;
        es.roster = env.items;
        std::sort(es.roster.begin(), es.roster.end());
        es.folds.resize(static_cast<std::size_t>(k));

        std::vector<std::string> ids;
        ids.reserve(es.roster.size());
        for (const auto& [id, labeled] : es.roster) ids.push_back(id);

        if (ood_env && *ood_env == env.env_id) {
            for (auto& f : es.folds) f.test = ids;
            plan.envs.push_back(std::move(es));
            continue;
        }

        const std::int64_t n = static_cast<std::int64_t>(ids.size());
        if (n < k)
            fail(Status::invalid_config, "make_folds: environment " + env.name +
                                             " has " + std::to_string(n) +
                                             " samples, fewer than K=" +
                                             std::to_string(k));

        StreamRng rng = StreamRng::keyed(seed, "fold-shuffle",
                                         static_cast<std::uint64_t>(env.env_id));
        rng.shuffle(ids);

        for (int f = 0; f < k; ++f) {
            FoldSplit& fold = es.folds[static_cast<std::size_t>(f)];
            // Near-equal chunks; sizes differ by at most one.
            const std::int64_t lo = n * f / k;
            const std::int64_t hi = n * (f + 1) / k;
            fold.test.assign(ids.begin() + lo, ids.begin() + hi);

            std::vector<std::string> rest;
            rest.reserve(static_cast<std::size_t>(n - (hi - lo)));
            rest.insert(rest.end(), ids.begin(), ids.begin() + lo);
            rest.insert(rest.end(), ids.begin() + hi, ids.end());

            const std::int64_t n_val = std::max<std::int64_t>(
                1, std::llround(val_fraction * static_cast<double>(rest.size())));
            fold.dp_val.assign(rest.begin(), rest.begin() + n_val);
            fold.dp_train.assign(rest.begin() + n_val, rest.end());

            // Default segmentor sets: every labeled id inside the dp sets.
            for (const auto& id : fold.dp_train)
                if (es.is_labeled(id)) fold.seg_train.push_back(id);
            for (const auto& id : fold.dp_val)
                if (es.is_labeled(id)) fold.seg_val.push_back(id);
        }
        plan.envs.push_back(std::move(es));
    }
    return plan;
}

SplitPlan make_folds(const std::vector<EnvironmentDataset>& envs, int k,
                     double val_fraction, std::optional<int> ood_env,
                     std::uint64_t seed) {
    std::vector<EnvRoster> rosters;
    rosters.reserve(envs.size());
    for (const auto& env : envs) {
        EnvRoster r;
        r.env_id = env.env_id;
        r.name = env.name;
        for (const auto& s : env.samples) r.items.emplace_back(s.sample_id, s.labeled());
        rosters.push_back(std::move(r));
    }
    return make_folds(rosters, k, val_fraction, ood_env, seed);
}

namespace {

std::vector<std::string> pick_labeled(const EnvSplit& env, const std::vector<std::string>& pool,
                                      int want, std::uint64_t seed, int fold,
                                      const char* tag) {
    std::vector<std::string> labeled;
    for (const auto& id : pool)
        if (env.is_labeled(id)) labeled.push_back(id);
    if (want > static_cast<int>(labeled.size()))
        fail(Status::invalid_config,
             "restrict_segmentor: env " + std::to_string(env.env_id) + " fold " +
                 std::to_string(fold) + ": budget " + std::to_string(want) +
                 " exceeds " + std::to_string(labeled.size()) + " labeled " + tag +
                 " samples");
    std::sort(labeled.begin(), labeled.end());
    StreamRng rng = StreamRng::keyed(seed, tag, static_cast<std::uint64_t>(env.env_id),
                                     static_cast<std::uint64_t>(fold));
    rng.shuffle(labeled);
    labeled.resize(static_cast<std::size_t>(want));
    return labeled;
}

} // namespace

SplitPlan restrict_segmentor(const SplitPlan& plan,
                             const std::map<int, std::pair<int, int>>& labeled_budget) {
    SplitPlan out = plan;
    for (auto& env : out.envs) {
        auto it = labeled_budget.find(env.env_id);
        if (it == labeled_budget.end()) continue;
        const auto [n_train, n_val] = it->second;
        for (int f = 0; f < out.k; ++f) {
            FoldSplit& fold = env.folds[static_cast<std::size_t>(f)];
            fold.seg_train =
                pick_labeled(env, fold.dp_train, n_train, plan.seed, f + 1, "seg-train");
            fold.seg_val =
                pick_labeled(env, fold.dp_val, n_val, plan.seed, f + 1, "seg-val");
        }
    }
    return out;
}

namespace {

void add_violation(std::vector<PlanViolation>& out, int env, int fold,
                   const std::string& rule, const std::string& detail) {
    out.push_back({env, fold, rule, detail});
}

bool is_subset(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const std::set<std::string> bs(b.begin(), b.end());
    for (const auto& x : a)
        if (!bs.count(x)) return false;
    return true;
}

} // namespace

std::vector<PlanViolation> verify_plan(const SplitPlan& plan) {
    std::vector<PlanViolation> out;
    if (plan.k < 2) add_violation(out, -1, -1, "k-too-small", "K < 2");

    for (const auto& env : plan.envs) {
        std::set<std::string> all_ids;
        std::set<std::string> labeled_ids;
        for (const auto& [id, labeled] : env.roster) {
            if (!all_ids.insert(id).second)
                add_violation(out, env.env_id, -1, "duplicate-id", id);
            if (labeled) labeled_ids.insert(id);
        }
        if (static_cast<int>(env.folds.size()) != plan.k) {
            add_violation(out, env.env_id, -1, "fold-count",
                          std::to_string(env.folds.size()) + " folds, expected " +
                              std::to_string(plan.k));
            continue;
        }
        const bool is_ood = plan.ood_env && *plan.ood_env == env.env_id;

        for (int f = 0; f < plan.k; ++f) {
            const FoldSplit& fold = env.folds[static_cast<std::size_t>(f)];
            const int fold1 = f + 1;

            if (is_ood) {
                if (std::set<std::string>(fold.test.begin(), fold.test.end()) != all_ids)
                    add_violation(out, env.env_id, fold1, "ood-not-all-test",
                                  "OoD environment test set must contain every sample");
                if (!fold.dp_train.empty() || !fold.dp_val.empty() ||
                    !fold.seg_train.empty() || !fold.seg_val.empty())
                    add_violation(out, env.env_id, fold1, "ood-nonempty-train",
                                  "OoD environment must have empty train/val sets");
                continue;
            }

            // test, dp_train, dp_val must partition the roster.
            std::map<std::string, int> seen;
            for (const auto& id : fold.test) seen[id]++;
            for (const auto& id : fold.dp_train) seen[id]++;
            for (const auto& id : fold.dp_val) seen[id]++;
            for (const auto& [id, count] : seen) {
                if (count > 1)
                    add_violation(out, env.env_id, fold1, "partition-overlap", id);
                if (!all_ids.count(id))
                    add_violation(out, env.env_id, fold1, "unknown-id", id);
            }
            for (const auto& id : all_ids)
                if (!seen.count(id))
                    add_violation(out, env.env_id, fold1, "partition-missing", id);

            if (!is_subset(fold.seg_train, fold.dp_train))
                add_violation(out, env.env_id, fold1, "seg-train-nesting",
                              "seg_train not a subset of dp_train");
            if (!is_subset(fold.seg_val, fold.dp_val))
                add_violation(out, env.env_id, fold1, "seg-val-nesting",
                              "seg_val not a subset of dp_val");
            for (const auto& id : fold.seg_train)
                if (all_ids.count(id) && !labeled_ids.count(id))
                    add_violation(out, env.env_id, fold1, "seg-unlabeled", id);
            for (const auto& id : fold.seg_val)
                if (all_ids.count(id) && !labeled_ids.count(id))
                    add_violation(out, env.env_id, fold1, "seg-unlabeled", id);
        }

        // Fold test sets rotate through the whole environment.
        if (!is_ood) {
            std::map<std::string, int> test_seen;
            for (const auto& fold : env.folds)
                for (const auto& id : fold.test) test_seen[id]++;
            for (const auto& [id, count] : test_seen)
                if (count > 1)
                    add_violation(out, env.env_id, -1, "test-folds-overlap", id);
            for (const auto& id : all_ids)
                if (!test_seen.count(id))
                    add_violation(out, env.env_id, -1, "test-folds-incomplete", id);
        }
    }
    return out;
}

namespace {

void write_id_line(std::ostream& os, const char* tag,
                   const std::vector<std::string>& ids) {
    os << tag;
    for (const auto& id : ids) os << " " << id;
    os << "\n";
}

std::vector<std::string> read_ids(std::istringstream& ls) {
    std::vector<std::string> ids;
    std::string id;
    while (ls >> id) ids.push_back(id);
    return ids;
}

} // namespace

void save_plan(const SplitPlan& plan, const std::string& path) {
    std::ostringstream os;
    os << "OODSPLITS1\n";
    os << "k " << plan.k << "\n";
    os << "val_fraction " << plan.val_fraction << "\n";
    os << "seed " << plan.seed << "\n";
    if (plan.ood_env) os << "ood_env " << *plan.ood_env << "\n";
    for (const auto& env : plan.envs) {
        os << "env " << env.env_id << " " << env.name << "\n";
        for (const auto& [id, labeled] : env.roster)
            os << "roster " << id << " " << (labeled ? 1 : 0) << "\n";
        for (int f = 0; f < plan.k; ++f) {
            const FoldSplit& fold = env.folds[static_cast<std::size_t>(f)];
            os << "fold " << (f + 1) << "\n";
            write_id_line(os, "test", fold.test);
            write_id_line(os, "dp_train", fold.dp_train);
            write_id_line(os, "dp_val", fold.dp_val);
            write_id_line(os, "seg_train", fold.seg_train);
            write_id_line(os, "seg_val", fold.seg_val);
        }
    }
    std::ofstream file(path, std::ios::trunc);
    if (!file) fail(Status::io_error, path + ": cannot open for writing");
    file << os.str();
    if (!file) fail(Status::io_error, path + ": write failed");
}

SplitPlan load_plan(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail(Status::io_error, path + ": cannot open");
    std::string line;
    if (!std::getline(is, line) || line != "OODSPLITS1")
        fail(Status::io_error, path + ": bad plan magic");

    SplitPlan plan;
    EnvSplit* env = nullptr;
    FoldSplit* fold = nullptr;
    int lineno = 1;
    auto ctx = [&](const std::string& msg) {
        return path + ":" + std::to_string(lineno) + ": " + msg;
    };
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "k") {
            ls >> plan.k;
        } else if (tag == "val_fraction") {
            ls >> plan.val_fraction;
        } else if (tag == "seed") {
            ls >> plan.seed;
        } else if (tag == "ood_env") {
            int id;
            ls >> id;
            plan.ood_env = id;
        } else if (tag == "env") {
            EnvSplit es;
            if (!(ls >> es.env_id >> es.name)) fail(Status::io_error, ctx("bad env line"));
            plan.envs.push_back(std::move(es));
            env = &plan.envs.back();
            fold = nullptr;
        } else if (tag == "roster") {
            if (!env) fail(Status::io_error, ctx("roster before env"));
            std::string id;
            int labeled;
            if (!(ls >> id >> labeled)) fail(Status::io_error, ctx("bad roster line"));
            env->roster.emplace_back(id, labeled != 0);
        } else if (tag == "fold") {
            if (!env) fail(Status::io_error, ctx("fold before env"));
            int f;
            if (!(ls >> f) || f < 1) fail(Status::io_error, ctx("bad fold index"));
            if (static_cast<int>(env->folds.size()) != f - 1)
                fail(Status::io_error, ctx("folds out of order"));
            env->folds.emplace_back();
            fold = &env->folds.back();
        } else if (tag == "test" || tag == "dp_train" || tag == "dp_val" ||
                   tag == "seg_train" || tag == "seg_val") {
            if (!fold) fail(Status::io_error, ctx("id list before fold"));
            auto ids = read_ids(ls);
            if (tag == "test")
                fold->test = std::move(ids);
            else if (tag == "dp_train")
                fold->dp_train = std::move(ids);
            else if (tag == "dp_val")
                fold->dp_val = std::move(ids);
            else if (tag == "seg_train")
                fold->seg_train = std::move(ids);
            else
                fold->seg_val = std::move(ids);
        } else {
            fail(Status::io_error, ctx("unknown record '" + tag + "'"));
        }
    }
    if (plan.k < 2 || plan.envs.empty())
        fail(Status::io_error, path + ": incomplete plan");
    return plan;
}

} // namespace oodseg
