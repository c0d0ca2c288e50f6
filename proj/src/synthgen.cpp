#include "oodseg/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace oodseg {

namespace {

std::string format_sample_id(int env_id, int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "e%d_s%04d", env_id, index);
    return buf;
}

double checkerboard(std::int64_t x, std::int64_t y, std::int64_t z, int period) {
    const std::int64_t cell = x / period + y / period + z / period;
    return (cell % 2 == 0) ? 1.0 : -1.0;
}

} // namespace

void EnvSpec::validate() const {
    if (n_labeled < 0 || n_unlabeled < 0)
        fail(Status::invalid_config, name + ": negative sample counts");
    if (volume_shape.w <= 0 || volume_shape.h <= 0 || volume_shape.d <= 0)
        fail(Status::invalid_config, name + ": non-positive volume shape");
    if (shape_params.radius_frac_lo <= 0 ||
        shape_params.radius_frac_hi < shape_params.radius_frac_lo)
        fail(Status::invalid_config, name + ": degenerate radius range");
    const double max_reach = shape_params.radius_frac_hi *
                                 (1.0 + shape_params.deform_amplitude) +
                             shape_params.center_jitter_frac;
    if (max_reach > 1.0)
        fail(Status::invalid_config,
             name + ": infeasible geometry, organ can exceed the volume "
                    "(radius+deformation+jitter reach " +
                 std::to_string(max_reach) + " of the half-extent)");
    if (spurious.correlation < -1.0 || spurious.correlation > 1.0)
        fail(Status::invalid_config, name + ": spurious correlation outside [-1,1]");
    if (spurious.period < 1)
        fail(Status::invalid_config, name + ": spurious period must be >= 1");
}

std::size_t EnvironmentDataset::labeled_count() const {
    std::size_t n = 0;
    for (const auto& s : samples)
        if (s.labeled()) ++n;
    return n;
}

OrganGeometry draw_organ_geometry(const EnvSpec& spec, const std::string& sample_id) {
    StreamRng rng = StreamRng::keyed(spec.seed, "geometry", hash_string(sample_id));
    const Shape3 s = spec.volume_shape;
    const double hx = (s.w - 1) / 2.0, hy = (s.h - 1) / 2.0, hz = (s.d - 1) / 2.0;
    const auto& sp = spec.shape_params;

    OrganGeometry g;
    g.cx = hx + rng.uniform(-sp.center_jitter_frac, sp.center_jitter_frac) * hx;
    g.cy = hy + rng.uniform(-sp.center_jitter_frac, sp.center_jitter_frac) * hy;
    g.cz = hz + rng.uniform(-sp.center_jitter_frac, sp.center_jitter_frac) * hz;
    const double fx = rng.uniform(sp.radius_frac_lo, sp.radius_frac_hi);
    const double fy = rng.uniform(sp.radius_frac_lo, sp.radius_frac_hi);
    const double fz = rng.uniform(sp.radius_frac_lo, sp.radius_frac_hi);
    g.rx = fx * hx;
    g.ry = fy * hy;
    g.rz = fz * hz;
    const double mid = (sp.radius_frac_lo + sp.radius_frac_hi) / 2.0;
    const double half = (sp.radius_frac_hi - sp.radius_frac_lo) / 2.0;
    const double mean_frac = (fx + fy + fz) / 3.0;
    g.size_norm = half > 0 ? (mean_frac - mid) / half : 0.0;
    return g;
}

namespace {

Sample generate_sample(const EnvSpec& spec, const std::string& sample_id, bool labeled) {
    const Shape3 s = spec.volume_shape;
    const OrganGeometry g = draw_organ_geometry(spec, sample_id);

    StreamRng rng = StreamRng::keyed(spec.seed, "render", hash_string(sample_id));
    const double deform = spec.shape_params.deform_amplitude;
    // One low-frequency mode per axis with random phase.
    const double phx = rng.uniform(0.0, 2.0 * M_PI);
    const double phy = rng.uniform(0.0, 2.0 * M_PI);
    const double phz = rng.uniform(0.0, 2.0 * M_PI);

    LabelMask mask;
    mask.shape = s;
    mask.voxels.assign(static_cast<std::size_t>(s.numel()), 0);
    for (std::int64_t z = 0; z < s.d; ++z)
        for (std::int64_t y = 0; y < s.h; ++y)
            for (std::int64_t x = 0; x < s.w; ++x) {
                const double dx = (x - g.cx) / g.rx;
                const double dy = (y - g.cy) / g.ry;
                const double dz = (z - g.cz) / g.rz;
                const double rho2 = dx * dx + dy * dy + dz * dz;
                double bound = 1.0;
                if (deform > 0.0) {
                    const double xn = s.w > 1 ? 2.0 * x / (s.w - 1) - 1.0 : 0.0;
                    const double yn = s.h > 1 ? 2.0 * y / (s.h - 1) - 1.0 : 0.0;
                    const double zn = s.d > 1 ? 2.0 * z / (s.d - 1) - 1.0 : 0.0;
                    const double wobble = std::sin(2.0 * M_PI * xn + phx) *
                                          std::sin(2.0 * M_PI * yn + phy) *
                                          std::sin(2.0 * M_PI * zn + phz);
                    bound = 1.0 + deform * wobble;
                }
                if (rho2 <= bound * bound)
                    mask.voxels[static_cast<std::size_t>(x + s.w * (y + s.h * z))] = 1;
            }

    Volume vol;
    vol.shape = s;
    vol.voxels.assign(static_cast<std::size_t>(s.numel()), 0.0);
    const double fg = spec.intensity.bg_mean + spec.intensity.fg_contrast;
    const double spur_amp =
        spec.spurious.correlation * spec.spurious.base_amplitude * g.size_norm;
    for (std::int64_t z = 0; z < s.d; ++z)
        for (std::int64_t y = 0; y < s.h; ++y)
            for (std::int64_t x = 0; x < s.w; ++x) {
                const std::size_t i = static_cast<std::size_t>(x + s.w * (y + s.h * z));
                if (mask.voxels[i]) {
                    vol.voxels[i] = fg;
                } else {
                    vol.voxels[i] = spec.intensity.bg_mean +
                                    spur_amp * checkerboard(x, y, z, spec.spurious.period);
                }
            }

    if (spec.intensity.bias_strength > 0.0) {
        // Order-2 polynomial; coefficient draws come after the phase draws.
        std::vector<double> coeffs;
        for (int i = 0; i <= 2; ++i)
            for (int j = 0; j + i <= 2; ++j)
                for (int k = 0; k + j + i <= 2; ++k)
                    coeffs.push_back(rng.uniform(-spec.intensity.bias_strength,
                                                 spec.intensity.bias_strength));
        bias_field(vol, coeffs, 2);
    }
    if (spec.intensity.noise_std > 0.0)
        add_gaussian_noise(vol, spec.intensity.noise_std, rng);

    Sample sample;
    sample.volume = std::move(vol);
    if (labeled) sample.mask = std::move(mask);
    sample.environment_id = spec.env_id;
    sample.sample_id = sample_id;
    return sample;
}

} // namespace

EnvironmentDataset generate_environment(const EnvSpec& spec) {
    spec.validate();
    EnvironmentDataset ds;
    ds.env_id = spec.env_id;
    ds.name = spec.name.empty() ? "env" + std::to_string(spec.env_id) : spec.name;
    ds.samples.reserve(static_cast<std::size_t>(spec.n_labeled + spec.n_unlabeled));
    for (int i = 0; i < spec.n_labeled; ++i)
        ds.samples.push_back(generate_sample(spec, format_sample_id(spec.env_id, i), true));
    for (int i = 0; i < spec.n_unlabeled; ++i)
        ds.samples.push_back(generate_sample(
            spec, format_sample_id(spec.env_id, spec.n_labeled + i), false));
    return ds;
}

std::vector<EnvSpec> default_env_suite(SuiteScale scale) {
    const bool desk = scale == SuiteScale::desk;
    const Shape3 shape = desk ? Shape3{32, 32, 24} : Shape3{64, 64, 48};
    const int n_labeled = desk ? 14 : 50;
    const int n_unlabeled = desk ? 4 : 20;

    std::vector<EnvSpec> suite(3);
    const char* names[3] = {"SynthA", "SynthB", "SynthC"};
    const double contrast[3] = {0.9, 0.7, 1.1};
    const double noise[3] = {0.06, 0.12, 0.09};
    const double bias[3] = {0.10, 0.25, 0.18};
    const double deform[3] = {0.08, 0.15, 0.22};
    const double spurious[3] = {0.8, 0.8, -0.8}; // two share the sign, third flips

    for (int e = 0; e < 3; ++e) {
        EnvSpec& spec = suite[static_cast<std::size_t>(e)];
        spec.env_id = e;
        spec.name = names[e];
        spec.n_labeled = n_labeled;
        spec.n_unlabeled = n_unlabeled;
        spec.volume_shape = shape;
        spec.shape_params = {0.30, 0.45, deform[e], 0.05};
        spec.intensity = {1.0, contrast[e], bias[e], noise[e]};
        spec.spurious = {spurious[e], 0.3, 4};
        spec.seed = 1000 + static_cast<std::uint64_t>(e);
    }
    return suite;
}

void write_dataset(const std::string& dir, const std::vector<EnvironmentDataset>& envs) {
    fs::create_directories(dir);
    std::ostringstream manifest;
    manifest << "OODMANIFEST1\n";
    for (const auto& env : envs)
        manifest << "env " << env.env_id << " " << env.name << "\n";
    for (const auto& env : envs) {
        for (const auto& s : env.samples) {
            if (s.sample_id.find_first_of(" \t\n") != std::string::npos)
                fail(Status::invalid_argument,
                     "write_dataset: sample id contains whitespace: " + s.sample_id);
            const std::string vol_rel = s.sample_id + "_vol.oodv";
            save_raw_volume(s.volume, (fs::path(dir) / vol_rel).string());
            manifest << "sample " << s.sample_id << " " << env.env_id << " "
                     << (s.labeled() ? 1 : 0) << " " << vol_rel;
            if (s.labeled()) {
                const std::string mask_rel = s.sample_id + "_mask.oodv";
                save_raw_mask(*s.mask, (fs::path(dir) / mask_rel).string());
                manifest << " " << mask_rel;
            }
            manifest << "\n";
        }
    }
    std::ofstream os(fs::path(dir) / "manifest.txt", std::ios::trunc);
    if (!os) fail(Status::io_error, dir + ": cannot write manifest.txt");
    os << manifest.str();
}

namespace {

struct ManifestEntry {
    std::string sample_id;
    int env_id;
    bool labeled;
    std::string vol_rel;
    std::string mask_rel;
};

void parse_manifest(const std::string& dir, std::map<int, std::string>& env_names,
                    std::vector<ManifestEntry>& entries) {
    const fs::path path = fs::path(dir) / "manifest.txt";
    std::ifstream is(path);
    if (!is) fail(Status::io_error, path.string() + ": cannot open");
    std::string line;
    if (!std::getline(is, line) || line != "OODMANIFEST1")
        fail(Status::io_error, path.string() + ": bad manifest magic");
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "env") {
            int id;
            std::string name;
            if (!(ls >> id >> name))
                fail(Status::io_error, path.string() + ":" + std::to_string(lineno) +
                                           ": malformed env line");
            env_names[id] = name;
        } else if (kind == "sample") {
            ManifestEntry e;
            int labeled;
            if (!(ls >> e.sample_id >> e.env_id >> labeled >> e.vol_rel))
                fail(Status::io_error, path.string() + ":" + std::to_string(lineno) +
                                           ": malformed sample line");
            e.labeled = labeled != 0;
            if (e.labeled && !(ls >> e.mask_rel))
                fail(Status::io_error, path.string() + ":" + std::to_string(lineno) +
                                           ": labeled sample missing mask path");
            entries.push_back(std::move(e));
        } else {
            fail(Status::io_error, path.string() + ":" + std::to_string(lineno) +
                                       ": unknown record '" + kind + "'");
        }
    }
}

} // namespace

std::vector<EnvironmentDataset> load_dataset(const std::string& dir) {
    std::map<int, std::string> env_names;
    std::vector<ManifestEntry> entries;
    parse_manifest(dir, env_names, entries);

    std::map<int, EnvironmentDataset> by_env;
    for (const auto& [id, name] : env_names) {
        by_env[id].env_id = id;
        by_env[id].name = name;
    }
    for (const auto& e : entries) {
        if (!env_names.count(e.env_id))
            fail(Status::io_error, dir + ": sample " + e.sample_id +
                                       " references undeclared env " +
                                       std::to_string(e.env_id));
        Sample s;
        s.sample_id = e.sample_id;
        s.environment_id = e.env_id;
        s.volume = load_raw_volume((fs::path(dir) / e.vol_rel).string());
        if (e.labeled) {
            s.mask = load_raw_mask((fs::path(dir) / e.mask_rel).string());
            if (!(s.mask->shape == s.volume.shape))
                fail(Status::io_error, dir + ": " + e.sample_id +
                                           ": mask shape differs from volume shape");
        }
        by_env[e.env_id].samples.push_back(std::move(s));
    }
    std::vector<EnvironmentDataset> out;
    out.reserve(by_env.size());
    for (auto& [id, env] : by_env) out.push_back(std::move(env));
    return out;
}

std::vector<EnvRoster> load_dataset_index(const std::string& dir) {
    std::map<int, std::string> env_names;
    std::vector<ManifestEntry> entries;
    parse_manifest(dir, env_names, entries);
    std::map<int, EnvRoster> by_env;
    for (const auto& [id, name] : env_names) {
        by_env[id].env_id = id;
        by_env[id].name = name;
    }
    for (const auto& e : entries)
        by_env[e.env_id].items.emplace_back(e.sample_id, e.labeled);
    std::vector<EnvRoster> out;
    out.reserve(by_env.size());
    for (auto& [id, r] : by_env) out.push_back(std::move(r));
    return out;
}

} // namespace oodseg
