#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "oodseg/common.hpp"
#include "oodseg/rng.hpp"

namespace oodseg {

/// 3D scalar grid. Voxels are stored x-fastest: index = x + W*(y + H*z).
struct Volume {
    Shape3 shape;
    std::vector<double> voxels;
    std::optional<std::array<double, 3>> spacing_mm;

    double at(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return voxels[static_cast<std::size_t>(x + shape.w * (y + shape.h * z))];
    }
    double& at(std::int64_t x, std::int64_t y, std::int64_t z) {
        return voxels[static_cast<std::size_t>(x + shape.w * (y + shape.h * z))];
    }
};

/// Binary mask paired with a Volume; voxel values are 0 or 1.
struct LabelMask {
    Shape3 shape;
    std::vector<std::uint8_t> voxels;

    std::uint8_t at(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return voxels[static_cast<std::size_t>(x + shape.w * (y + shape.h * z))];
    }
    std::int64_t foreground_count() const;
};

struct Sample {
    Volume volume;
    std::optional<LabelMask> mask; // present iff labeled
    int environment_id = 0;
    std::string sample_id;

    bool labeled() const { return mask.has_value(); }
};

struct AugmentationConfig {
    bool enable_affine = false;
    double rotation_deg = 10.0;       // per-axis rotation drawn in [-r, r]
    double scale_lo = 0.9;
    double scale_hi = 1.1;

    bool enable_flip = false;
    std::array<bool, 3> flip_axes = {true, false, false};

    bool enable_motion = false;
    int motion_ghosts_max = 2;        // 1..max ghost translations
    int motion_shift_voxels = 2;

    bool enable_bias_field = false;
    double bias_coeff_max = 0.3;      // polynomial coefficients in [-c, c]
    int bias_order = 3;

    bool enable_noise = false;
    double noise_std_max = 0.05;      // relative to the volume's value range

    std::uint64_t seed = 0;

    bool any_enabled() const {
        return enable_affine || enable_flip || enable_motion ||
               enable_bias_field || enable_noise;
    }
    /// Throws when an enabled transform has a degenerate parameter range.
    void validate() const;
};

// ---- raw volume container ("OODV1\0") ------------------------------------
// magic "OODV1\0", then W,H,D as uint32 LE, then W*H*D float32 LE, x-fastest.
// Masks use the same container with voxel values 0.0/1.0.

Volume load_raw_volume(const std::string& path);
void save_raw_volume(const Volume& v, const std::string& path);
LabelMask load_raw_mask(const std::string& path);
void save_raw_mask(const LabelMask& m, const std::string& path);

// ---- deterministic preprocessing ------------------------------------------

/// Copies the axis-aligned box [origin, origin+size) out of v.
Volume crop_fixed(const Volume& v, const std::array<std::int64_t, 3>& origin,
                  const Shape3& size);
LabelMask crop_fixed(const LabelMask& m, const std::array<std::int64_t, 3>& origin,
                     const Shape3& size);

/// Centers v inside target and zero-pads; odd margins put the smaller half on
/// the low side.
Volume pad_to_shape(const Volume& v, const Shape3& target);
LabelMask pad_to_shape(const LabelMask& m, const Shape3& target);

/// mask = 1 where raw value is in foreground_classes, else 0.
LabelMask binarize_labels(const std::vector<std::int32_t>& raw, const Shape3& shape,
                          const std::vector<std::int32_t>& foreground_classes);

/// In-place per-volume z-score; constant volumes normalize to all zeros.
void zscore_normalize(Volume& v);

// ---- stochastic augmentation ----------------------------------------------
// Primitive transforms are exposed for direct testing; augment() composes
// them in the fixed order affine -> flip -> motion -> bias field -> noise.
// Spatial transforms are applied identically to volume and mask (mask via
// nearest neighbor); intensity transforms never touch the mask.

void flip_axis(Volume& v, int axis);
void flip_axis(LabelMask& m, int axis);

/// Rotation (degrees, about the volume center) plus isotropic scale; volume
/// resampled trilinearly, mask nearest-neighbor, outside mapped to 0.
void affine_transform(Volume& v, LabelMask* mask, const std::array<double, 3>& rot_deg,
                      double scale);

/// Ghosting artifact: blends integer-shifted copies into the volume.
void motion_ghosts(Volume& v, const std::vector<std::array<std::int64_t, 3>>& shifts,
                   const std::vector<double>& weights);

/// Multiplies by exp(P(x,y,z)) with P a polynomial over [-1,1]^3 coordinates.
void bias_field(Volume& v, const std::vector<double>& coeffs, int order);

void add_gaussian_noise(Volume& v, double stddev, StreamRng& rng);

Sample augment(const Sample& s, const AugmentationConfig& cfg, StreamRng& rng);

} // namespace oodseg
