#pragma once

#include <string>
#include <vector>

#include "oodseg/volumes.hpp"

namespace oodseg {

/// Organ geometry: an ellipsoid whose per-axis radii are drawn from
/// [radius_frac_lo, radius_frac_hi] (fractions of the half-extent), warped by
/// a low-frequency sinusoidal radial deformation of relative amplitude
/// deform_amplitude. Masks stay single-component up to amplitude ~0.25.
struct ShapeParams {
    double radius_frac_lo = 0.30;
    double radius_frac_hi = 0.45;
    double deform_amplitude = 0.0;
    double center_jitter_frac = 0.05;
};

struct IntensityParams {
    double bg_mean = 1.0;
    double fg_contrast = 1.0;   // foreground mean = bg_mean + fg_contrast
    double bias_strength = 0.0; // multiplicative low-order polynomial field
    double noise_std = 0.0;
};

/// Background checkerboard whose amplitude tracks the drawn organ size:
/// amplitude = correlation * base_amplitude * size_norm, size_norm in [-1,1].
struct SpuriousParams {
    double correlation = 0.0; // in [-1, 1]
    double base_amplitude = 0.3;
    int period = 4;
};

struct EnvSpec {
    int env_id = 0;
    std::string name;
    int n_labeled = 0;
    int n_unlabeled = 0;
    Shape3 volume_shape;
    ShapeParams shape_params;
    IntensityParams intensity;
    SpuriousParams spurious;
    std::uint64_t seed = 0;

    void validate() const;
};

/// A named environment; labeled samples first, then unlabeled.
struct EnvironmentDataset {
    int env_id = 0;
    std::string name;
    std::vector<Sample> samples;

    std::size_t labeled_count() const;
};

enum class SuiteScale { desk, full };

/// All per-sample randomness is keyed by (spec.seed, sample_id), so a sample
/// is reproducible no matter the generation order.
EnvironmentDataset generate_environment(const EnvSpec& spec);

/// Three environments differing in contrast, noise, deformation amplitude and
/// spurious-correlation sign (+, +, -). Desk shape (32,32,24), full (64,64,48).
std::vector<EnvSpec> default_env_suite(SuiteScale scale);

/// Analytic ellipsoid membership for the undeformed organ of a sample; test
/// oracle and the generator share this definition through the spec values.
struct OrganGeometry {
    double cx, cy, cz;
    double rx, ry, rz;
    double size_norm; // mean radius mapped to [-1, 1] over the spec range
};
OrganGeometry draw_organ_geometry(const EnvSpec& spec, const std::string& sample_id);

// ---- dataset directory I/O -------------------------------------------------
// Layout: <dir>/manifest.txt plus one raw volume file per sample (and one raw
// mask file per labeled sample). Manifest lines:
//   OODMANIFEST1
//   env <env_id> <name>
//   sample <sample_id> <env_id> <labeled 0|1> <volume_relpath> [<mask_relpath>]

void write_dataset(const std::string& dir, const std::vector<EnvironmentDataset>& envs);
std::vector<EnvironmentDataset> load_dataset(const std::string& dir);

/// Roster of (sample_id, labeled) per environment; reads only the manifest.
struct EnvRoster {
    int env_id = 0;
    std::string name;
    std::vector<std::pair<std::string, bool>> items;
};
std::vector<EnvRoster> load_dataset_index(const std::string& dir);

} // namespace oodseg
