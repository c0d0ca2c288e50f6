#include "oodseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "oodseg/common.hpp"

namespace oodseg {

double dice_score(const LabelMask& pred, const LabelMask& gt) {
    if (!(pred.shape == gt.shape))
        fail(Status::invalid_argument, "dice_score: shape mismatch " +
                                           to_string(pred.shape) + " vs " +
                                           to_string(gt.shape));
    std::int64_t inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.voxels.size(); ++i) {
        inter += pred.voxels[i] & gt.voxels[i];
        a += pred.voxels[i];
        b += gt.voxels[i];
    }
    if (a + b == 0) return 100.0; // both empty: perfect agreement
    return 100.0 * 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

double domain_accuracy(const Tensor& domain_logits, const std::vector<int>& labels) {
    if (domain_logits.ndim() != 2)
        fail(Status::invalid_argument, "domain_accuracy: logits must be 2-d");
    const std::int64_t b = domain_logits.dim(0);
    const std::int64_t nd = domain_logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != b)
        fail(Status::invalid_argument, "domain_accuracy: label count mismatch");
    std::int64_t correct = 0;
    for (std::int64_t s = 0; s < b; ++s) {
        const double* z = domain_logits.ptr() + s * nd;
        int arg = 0;
        for (std::int64_t d = 1; d < nd; ++d)
            if (z[d] > z[arg]) arg = static_cast<int>(d); // ties keep the lowest index
        if (arg == labels[static_cast<std::size_t>(s)]) ++correct;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(b);
}

namespace {

std::pair<double, double> mean_pop_std(const std::vector<double>& xs) {
    const double n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return {mean, std::sqrt(var / n)};
}

std::string fmt_full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_cell(double mean, double stddev) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f ± %.1f", mean, stddev);
    return buf;
}

} // namespace

MethodReport aggregate(const std::string& method, const std::vector<FoldResult>& folds) {
    if (folds.empty()) fail(Status::invalid_argument, "aggregate: no fold results");
    const auto& first = folds.front();
    MethodReport report;
    report.method = method;
    report.n_folds = static_cast<int>(folds.size());

    for (const auto& env0 : first.envs) {
        std::vector<double> dices;
        for (const auto& fold : folds) {
            const EnvResult* found = nullptr;
            for (const auto& e : fold.envs)
                if (e.env_id == env0.env_id) found = &e;
            if (!found)
                fail(Status::invalid_argument,
                     "aggregate: fold results disagree on environment set (env " +
                         std::to_string(env0.env_id) + ")");
            dices.push_back(found->dice);
        }
        const auto [mean, stddev] = mean_pop_std(dices);
        report.envs.push_back({env0.env_id, env0.env_name, env0.role, mean, stddev});
    }
    std::sort(report.envs.begin(), report.envs.end(),
              [](const EnvAggregate& a, const EnvAggregate& b) { return a.env_id < b.env_id; });

    std::vector<double> accs;
    for (const auto& fold : folds)
        if (fold.domain_acc) accs.push_back(*fold.domain_acc);
    if (!accs.empty()) {
        if (accs.size() != folds.size())
            fail(Status::invalid_argument,
                 "aggregate: domain accuracy present in only some folds");
        const auto [mean, stddev] = mean_pop_std(accs);
        report.domacc_mean = mean;
        report.domacc_std = stddev;
    }
    return report;
}

std::string emit_table(const std::vector<MethodReport>& reports) {
    if (reports.empty()) fail(Status::invalid_argument, "emit_table: no reports");
    const auto& env_ref = reports.front().envs;
    for (const auto& r : reports) {
        if (r.envs.size() != env_ref.size())
            fail(Status::invalid_argument, "emit_table: inconsistent environment sets");
        for (std::size_t i = 0; i < env_ref.size(); ++i)
            if (r.envs[i].env_id != env_ref[i].env_id ||
                r.envs[i].role != env_ref[i].role)
                fail(Status::invalid_argument, "emit_table: inconsistent environment sets");
    }
    bool any_acc = false;
    for (const auto& r : reports) any_acc |= r.domacc_mean.has_value();

    std::vector<std::vector<std::string>> cells;
    std::vector<std::string> header;
    header.push_back("Method");
    for (const auto& e : env_ref)
        header.push_back(e.role == EnvRole::in_distribution ? "**" + e.env_name + "**"
                                                            : e.env_name);
    if (any_acc) header.push_back("Dom. Pred. Acc.");
    cells.push_back(header);

    for (const auto& r : reports) {
        std::vector<std::string> row;
        row.push_back(r.method);
        for (const auto& e : r.envs) row.push_back(fmt_cell(e.dice_mean, e.dice_std));
        if (any_acc)
            row.push_back(r.domacc_mean ? fmt_cell(*r.domacc_mean, *r.domacc_std) : "-");
        cells.push_back(row);
    }

    // Column widths in terms of display; "±" is multi-byte, count it as one.
    auto display_len = [](const std::string& s) {
        std::size_t len = 0;
        for (unsigned char c : s)
            if ((c & 0xc0) != 0x80) ++len;
        return len;
    };
    std::vector<std::size_t> width(cells[0].size(), 0);
    for (const auto& row : cells)
        for (std::size_t c = 0; c < row.size(); ++c)
            width[c] = std::max(width[c], display_len(row[c]));

    std::ostringstream os;
    auto emit_row = [&](const std::vector<std::string>& row) {
        os << "|";
        for (std::size_t c = 0; c < row.size(); ++c) {
            os << " " << row[c]
               << std::string(width[c] - display_len(row[c]), ' ') << " |";
        }
        os << "\n";
    };
    emit_row(cells[0]);
    os << "|";
    for (std::size_t c = 0; c < width.size(); ++c)
        os << std::string(width[c] + 2, '-') << "|";
    os << "\n";
    for (std::size_t r = 1; r < cells.size(); ++r) emit_row(cells[r]);
    return os.str();
}

namespace {

void check_csv_field(const std::string& s) {
    if (s.find_first_of(",\n\r") != std::string::npos)
        fail(Status::invalid_argument, "csv field contains a separator: " + s);
}

} // namespace

std::string emit_csv(const std::vector<MethodReport>& reports) {
    std::ostringstream os;
    os << "method,env,role,dice_mean,dice_std,domacc_mean,domacc_std,n_folds\n";
    for (const auto& r : reports) {
        check_csv_field(r.method);
        for (const auto& e : r.envs) {
            check_csv_field(e.env_name);
            os << r.method << "," << e.env_name << ","
               << (e.role == EnvRole::in_distribution ? "train" : "ood") << ","
               << fmt_full(e.dice_mean) << "," << fmt_full(e.dice_std) << ",";
            if (r.domacc_mean) os << fmt_full(*r.domacc_mean);
            os << ",";
            if (r.domacc_std) os << fmt_full(*r.domacc_std);
            os << "," << r.n_folds << "\n";
        }
    }
    return os.str();
}

std::vector<MethodReport> parse_csv(const std::string& csv) {
    std::istringstream is(csv);
    std::string line;
    if (!std::getline(is, line) ||
        line != "method,env,role,dice_mean,dice_std,domacc_mean,domacc_std,n_folds")
        fail(Status::io_error, "parse_csv: missing or unexpected header");

    std::vector<MethodReport> reports;
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (;;) {
            const std::size_t pos = line.find(',', start);
            if (pos == std::string::npos) {
                fields.push_back(line.substr(start));
                break;
            }
            fields.push_back(line.substr(start, pos - start));
            start = pos + 1;
        }
        if (fields.size() != 8)
            fail(Status::io_error,
                 "parse_csv: line " + std::to_string(lineno) + ": expected 8 fields");

        if (reports.empty() || reports.back().method != fields[0]) {
            reports.emplace_back();
            reports.back().method = fields[0];
        }
        MethodReport& r = reports.back();
        EnvAggregate e;
        e.env_id = static_cast<int>(r.envs.size());
        e.env_name = fields[1];
        if (fields[2] == "train")
            e.role = EnvRole::in_distribution;
        else if (fields[2] == "ood")
            e.role = EnvRole::ood;
        else
            fail(Status::io_error, "parse_csv: line " + std::to_string(lineno) +
                                       ": bad role '" + fields[2] + "'");
        e.dice_mean = std::stod(fields[3]);
        e.dice_std = std::stod(fields[4]);
        if (!fields[5].empty()) r.domacc_mean = std::stod(fields[5]);
        if (!fields[6].empty()) r.domacc_std = std::stod(fields[6]);
        r.n_folds = std::stoi(fields[7]);
        r.envs.push_back(std::move(e));
    }
    return reports;
}

std::pair<int, double> worst_env_report(const MethodReport& report) {
    if (report.envs.empty()) fail(Status::invalid_argument, "worst_env_report: no envs");
    int env_id = report.envs.front().env_id;
    double dice = report.envs.front().dice_mean;
    for (const auto& e : report.envs) {
        if (e.dice_mean < dice || (e.dice_mean == dice && e.env_id < env_id)) {
            dice = e.dice_mean;
            env_id = e.env_id;
        }
    }
    return {env_id, dice};
}

void save_fold_result(const FoldResult& r, const std::string& method,
                      const std::string& path) {
    std::ostringstream os;
    os << "OODFOLD1\n";
    os << "method " << method << "\n";
    os << "fold " << r.fold << "\n";
    os << "seed " << r.seed << "\n";
    for (const auto& e : r.envs)
        os << "env " << e.env_id << " " << e.env_name << " "
           << (e.role == EnvRole::in_distribution ? "train" : "ood") << " "
           << fmt_full(e.dice) << "\n";
    if (r.domain_acc) os << "domacc " << fmt_full(*r.domain_acc) << "\n";
    std::ofstream file(path, std::ios::trunc);
    if (!file) fail(Status::io_error, path + ": cannot open for writing");
    file << os.str();
    if (!file) fail(Status::io_error, path + ": write failed");
}

FoldResult load_fold_result(const std::string& path, std::string* method) {
    std::ifstream is(path);
    if (!is) fail(Status::io_error, path + ": cannot open");
    std::string line;
    if (!std::getline(is, line) || line != "OODFOLD1")
        fail(Status::io_error, path + ": bad fold-result magic");
    FoldResult r;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "method") {
            std::string m;
            std::getline(ls, m);
            if (!m.empty() && m.front() == ' ') m.erase(0, 1);
            if (method) *method = m;
        } else if (tag == "fold") {
            ls >> r.fold;
        } else if (tag == "seed") {
            ls >> r.seed;
        } else if (tag == "env") {
            EnvResult e;
            std::string role;
            if (!(ls >> e.env_id >> e.env_name >> role >> e.dice))
                fail(Status::io_error, path + ": malformed env line");
            e.role = role == "ood" ? EnvRole::ood : EnvRole::in_distribution;
            r.envs.push_back(std::move(e));
        } else if (tag == "domacc") {
            double v;
            ls >> v;
            r.domain_acc = v;
        } else {
            fail(Status::io_error, path + ": unknown record '" + tag + "'");
        }
    }
    return r;
}

} // namespace oodseg
