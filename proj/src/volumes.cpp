#include "oodseg/volumes.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace oodseg {

namespace {

constexpr char kMagic[6] = {'O', 'O', 'D', 'V', '1', '\0'};

void write_u32le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
}

std::vector<float> read_payload(std::istream& is, const std::string& path,
                                Shape3& shape) {
    char magic[6];
    is.read(magic, 6);
    if (!is || std::memcmp(magic, kMagic, 6) != 0)
        fail(Status::io_error, path + ": malformed header (bad magic)");
    shape.w = read_u32le(is);
    shape.h = read_u32le(is);
    shape.d = read_u32le(is);
    if (!is || shape.w <= 0 || shape.h <= 0 || shape.d <= 0)
        fail(Status::io_error, path + ": malformed header (bad shape)");
    const std::int64_t n = shape.numel();
    std::vector<float> buf(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (is.gcount() != static_cast<std::streamsize>(n * sizeof(float)))
        fail(Status::io_error, path + ": truncated payload");
    char extra;
    if (is.read(&extra, 1))
        fail(Status::io_error, path + ": trailing bytes after payload");
    return buf;
}

template <typename T>
void check_crop_box(const T& v, const std::array<std::int64_t, 3>& origin,
                    const Shape3& size) {
    if (size.w <= 0 || size.h <= 0 || size.d <= 0)
        fail(Status::invalid_argument, "crop_fixed: non-positive size");
    if (origin[0] < 0 || origin[1] < 0 || origin[2] < 0 ||
        origin[0] + size.w > v.shape.w || origin[1] + size.h > v.shape.h ||
        origin[2] + size.d > v.shape.d)
        fail(Status::invalid_argument,
             "crop_fixed: box exceeds bounds: origin (" + std::to_string(origin[0]) +
                 "," + std::to_string(origin[1]) + "," + std::to_string(origin[2]) +
                 ") size " + to_string(size) + " in " + to_string(v.shape));
}

template <typename Elem, typename T>
std::vector<Elem> crop_voxels(const T& v, const std::array<std::int64_t, 3>& origin,
                              const Shape3& size) {
    std::vector<Elem> out(static_cast<std::size_t>(size.numel()));
    std::size_t o = 0;
    for (std::int64_t z = 0; z < size.d; ++z)
        for (std::int64_t y = 0; y < size.h; ++y)
            for (std::int64_t x = 0; x < size.w; ++x)
                out[o++] = v.at(origin[0] + x, origin[1] + y, origin[2] + z);
    return out;
}

void check_pad_target(const Shape3& shape, const Shape3& target) {
    if (shape.w > target.w || shape.h > target.h || shape.d > target.d)
        fail(Status::invalid_argument, "pad_to_shape: input " + to_string(shape) +
                                           " exceeds target " + to_string(target));
}

std::array<std::int64_t, 3> pad_offsets(const Shape3& shape, const Shape3& target) {
    // Left-biased: floor of the margin goes to the low side.
    return {(target.w - shape.w) / 2, (target.h - shape.h) / 2,
            (target.d - shape.d) / 2};
}

} // namespace

std::int64_t LabelMask::foreground_count() const {
    std::int64_t n = 0;
    for (std::uint8_t v : voxels) n += v;
    return n;
}

void AugmentationConfig::validate() const {
    if (enable_affine && (rotation_deg < 0 || scale_lo <= 0 || scale_hi < scale_lo))
        fail(Status::invalid_config, "augmentation: degenerate affine ranges");
    if (enable_flip && !(flip_axes[0] || flip_axes[1] || flip_axes[2]))
        fail(Status::invalid_config, "augmentation: flip enabled with no axes");
    if (enable_motion && (motion_ghosts_max < 1 || motion_shift_voxels < 1))
        fail(Status::invalid_config, "augmentation: degenerate motion ranges");
    if (enable_bias_field && (bias_coeff_max <= 0 || bias_order < 1))
        fail(Status::invalid_config, "augmentation: degenerate bias-field range");
    if (enable_noise && noise_std_max <= 0)
        fail(Status::invalid_config, "augmentation: degenerate noise range");
}

Volume load_raw_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(Status::io_error, path + ": cannot open");
    Volume v;
    std::vector<float> buf = read_payload(is, path, v.shape);
    v.voxels.resize(buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        if (!std::isfinite(buf[i]))
            fail(Status::io_error, path + ": non-finite voxel at index " +
                                       std::to_string(i));
        v.voxels[i] = static_cast<double>(buf[i]);
    }
    return v;
}

void save_raw_volume(const Volume& v, const std::string& path) {
    if (v.shape.numel() != static_cast<std::int64_t>(v.voxels.size()))
        fail(Status::invalid_argument, "save_raw_volume: shape/voxel count mismatch");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail(Status::io_error, path + ": cannot open for writing");
    os.write(kMagic, 6);
    write_u32le(os, static_cast<std::uint32_t>(v.shape.w));
    write_u32le(os, static_cast<std::uint32_t>(v.shape.h));
    write_u32le(os, static_cast<std::uint32_t>(v.shape.d));
    std::vector<float> buf(v.voxels.size());
    for (std::size_t i = 0; i < buf.size(); ++i)
        buf[i] = static_cast<float>(v.voxels[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!os) fail(Status::io_error, path + ": write failed");
}

LabelMask load_raw_mask(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(Status::io_error, path + ": cannot open");
    LabelMask m;
    std::vector<float> buf = read_payload(is, path, m.shape);
    m.voxels.resize(buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        if (buf[i] != 0.0f && buf[i] != 1.0f)
            fail(Status::io_error, path + ": mask voxel not in {0,1} at index " +
                                       std::to_string(i));
        m.voxels[i] = static_cast<std::uint8_t>(buf[i]);
    }
    return m;
}

void save_raw_mask(const LabelMask& m, const std::string& path) {
    Volume v;
    v.shape = m.shape;
    v.voxels.assign(m.voxels.begin(), m.voxels.end());
    save_raw_volume(v, path);
}

Volume crop_fixed(const Volume& v, const std::array<std::int64_t, 3>& origin,
                  const Shape3& size) {
    check_crop_box(v, origin, size);
    Volume out;
    out.shape = size;
    out.spacing_mm = v.spacing_mm;
    out.voxels = crop_voxels<double>(v, origin, size);
    return out;
}

LabelMask crop_fixed(const LabelMask& m, const std::array<std::int64_t, 3>& origin,
                     const Shape3& size) {
    check_crop_box(m, origin, size);
    LabelMask out;
    out.shape = size;
    out.voxels = crop_voxels<std::uint8_t>(m, origin, size);
    return out;
}

Volume pad_to_shape(const Volume& v, const Shape3& target) {
    check_pad_target(v.shape, target);
    const auto off = pad_offsets(v.shape, target);
    Volume out;
    out.shape = target;
    out.spacing_mm = v.spacing_mm;
    out.voxels.assign(static_cast<std::size_t>(target.numel()), 0.0);
    for (std::int64_t z = 0; z < v.shape.d; ++z)
        for (std::int64_t y = 0; y < v.shape.h; ++y)
            for (std::int64_t x = 0; x < v.shape.w; ++x)
                out.at(x + off[0], y + off[1], z + off[2]) = v.at(x, y, z);
    return out;
}

LabelMask pad_to_shape(const LabelMask& m, const Shape3& target) {
    check_pad_target(m.shape, target);
    const auto off = pad_offsets(m.shape, target);
    LabelMask out;
    out.shape = target;
    out.voxels.assign(static_cast<std::size_t>(target.numel()), 0);
    for (std::int64_t z = 0; z < m.shape.d; ++z)
        for (std::int64_t y = 0; y < m.shape.h; ++y)
            for (std::int64_t x = 0; x < m.shape.w; ++x)
                out.voxels[static_cast<std::size_t>(
                    (x + off[0]) + target.w * ((y + off[1]) + target.h * (z + off[2])))] =
                    m.at(x, y, z);
    return out;
}

LabelMask binarize_labels(const std::vector<std::int32_t>& raw, const Shape3& shape,
                          const std::vector<std::int32_t>& foreground_classes) {
    if (static_cast<std::int64_t>(raw.size()) != shape.numel())
        fail(Status::invalid_argument, "binarize_labels: shape/voxel count mismatch");
    const std::set<std::int32_t> fg(foreground_classes.begin(), foreground_classes.end());
    LabelMask m;
    m.shape = shape;
    m.voxels.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
        m.voxels[i] = fg.count(raw[i]) ? 1 : 0;
    return m;
}

void zscore_normalize(Volume& v) {
    const std::size_t n = v.voxels.size();
    if (n == 0) return;
    double mean = 0.0;
    for (double x : v.voxels) mean += x;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double x : v.voxels) var += (x - mean) * (x - mean);
    var /= static_cast<double>(n);
    const double sd = std::sqrt(var);
    if (sd == 0.0) {
        for (double& x : v.voxels) x = 0.0;
        return;
    }
    for (double& x : v.voxels) x = (x - mean) / sd;
}

namespace {

template <typename T, typename Elem>
void flip_voxels(T& v, int axis) {
    if (axis < 0 || axis > 2) fail(Status::invalid_argument, "flip_axis: bad axis");
    const Shape3 s = v.shape;
    std::vector<Elem> out(v.voxels.size());
    for (std::int64_t z = 0; z < s.d; ++z)
        for (std::int64_t y = 0; y < s.h; ++y)
            for (std::int64_t x = 0; x < s.w; ++x) {
                const std::int64_t sx = axis == 0 ? s.w - 1 - x : x;
                const std::int64_t sy = axis == 1 ? s.h - 1 - y : y;
                const std::int64_t sz = axis == 2 ? s.d - 1 - z : z;
                out[static_cast<std::size_t>(x + s.w * (y + s.h * z))] =
                    v.at(sx, sy, sz);
            }
    v.voxels = std::move(out);
}

} // namespace

void flip_axis(Volume& v, int axis) { flip_voxels<Volume, double>(v, axis); }
void flip_axis(LabelMask& m, int axis) { flip_voxels<LabelMask, std::uint8_t>(m, axis); }

void affine_transform(Volume& v, LabelMask* mask, const std::array<double, 3>& rot_deg,
                      double scale) {
    if (mask && !(mask->shape == v.shape))
        fail(Status::invalid_argument, "affine_transform: volume/mask shape mismatch");
    const Shape3 s = v.shape;
    const double cx = (s.w - 1) / 2.0, cy = (s.h - 1) / 2.0, cz = (s.d - 1) / 2.0;

    // Inverse map: output voxel -> source coordinate. Inverse of R*S is
    // S^-1 * R^-1 = (1/scale) * Rz(-a)Ry(-b)Rx(-c) given R = Rx(c)Ry(b)Rz(a).
    const double ax = -rot_deg[0] * M_PI / 180.0;
    const double ay = -rot_deg[1] * M_PI / 180.0;
    const double az = -rot_deg[2] * M_PI / 180.0;
    const double cxr = std::cos(ax), sxr = std::sin(ax);
    const double cyr = std::cos(ay), syr = std::sin(ay);
    const double czr = std::cos(az), szr = std::sin(az);
    // M = Rz(az)*Ry(ay)*Rx(ax), applied to centered coordinates.
    double m[3][3];
    m[0][0] = czr * cyr;
    m[0][1] = czr * syr * sxr - szr * cxr;
    m[0][2] = czr * syr * cxr + szr * sxr;
    m[1][0] = szr * cyr;
    m[1][1] = szr * syr * sxr + czr * cxr;
    m[1][2] = szr * syr * cxr - czr * sxr;
    m[2][0] = -syr;
    m[2][1] = cyr * sxr;
    m[2][2] = cyr * cxr;
    const double inv_scale = 1.0 / scale;

    std::vector<double> out(v.voxels.size(), 0.0);
    std::vector<std::uint8_t> mout;
    if (mask) mout.assign(mask->voxels.size(), 0);

    for (std::int64_t z = 0; z < s.d; ++z)
        for (std::int64_t y = 0; y < s.h; ++y)
            for (std::int64_t x = 0; x < s.w; ++x) {
                const double dx = x - cx, dy = y - cy, dz = z - cz;
                const double sx = cx + inv_scale * (m[0][0] * dx + m[0][1] * dy + m[0][2] * dz);
                const double sy = cy + inv_scale * (m[1][0] * dx + m[1][1] * dy + m[1][2] * dz);
                const double sz = cz + inv_scale * (m[2][0] * dx + m[2][1] * dy + m[2][2] * dz);
                const std::size_t oi = static_cast<std::size_t>(x + s.w * (y + s.h * z));

                // Trilinear for the volume.
                const std::int64_t x0 = static_cast<std::int64_t>(std::floor(sx));
                const std::int64_t y0 = static_cast<std::int64_t>(std::floor(sy));
                const std::int64_t z0 = static_cast<std::int64_t>(std::floor(sz));
                const double fx = sx - x0, fy = sy - y0, fz = sz - z0;
                double acc = 0.0;
                for (int dz8 = 0; dz8 < 2; ++dz8)
                    for (int dy8 = 0; dy8 < 2; ++dy8)
                        for (int dx8 = 0; dx8 < 2; ++dx8) {
                            const std::int64_t xi = x0 + dx8, yi = y0 + dy8, zi = z0 + dz8;
                            if (xi < 0 || yi < 0 || zi < 0 || xi >= s.w || yi >= s.h ||
                                zi >= s.d)
                                continue;
                            const double wgt = (dx8 ? fx : 1 - fx) * (dy8 ? fy : 1 - fy) *
                                               (dz8 ? fz : 1 - fz);
                            acc += wgt * v.at(xi, yi, zi);
                        }
                out[oi] = acc;

                if (mask) {
                    const std::int64_t xn = static_cast<std::int64_t>(std::llround(sx));
                    const std::int64_t yn = static_cast<std::int64_t>(std::llround(sy));
                    const std::int64_t zn = static_cast<std::int64_t>(std::llround(sz));
                    if (xn >= 0 && yn >= 0 && zn >= 0 && xn < s.w && yn < s.h && zn < s.d)
                        mout[oi] = mask->at(xn, yn, zn);
                }
            }
    v.voxels = std::move(out);
    if (mask) mask->voxels = std::move(mout);
}

void motion_ghosts(Volume& v, const std::vector<std::array<std::int64_t, 3>>& shifts,
                   const std::vector<double>& weights) {
    if (shifts.size() != weights.size())
        fail(Status::invalid_argument, "motion_ghosts: shifts/weights size mismatch");
    double total = 0.0;
    for (double w : weights) total += w;
    if (total >= 1.0)
        fail(Status::invalid_argument, "motion_ghosts: ghost weights must sum below 1");
    const Shape3 s = v.shape;
    std::vector<double> out(v.voxels.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - total) * v.voxels[i];
    for (std::size_t g = 0; g < shifts.size(); ++g) {
        const auto& sh = shifts[g];
        for (std::int64_t z = 0; z < s.d; ++z)
            for (std::int64_t y = 0; y < s.h; ++y)
                for (std::int64_t x = 0; x < s.w; ++x) {
                    const std::int64_t sx = x - sh[0], sy = y - sh[1], sz = z - sh[2];
                    if (sx < 0 || sy < 0 || sz < 0 || sx >= s.w || sy >= s.h || sz >= s.d)
                        continue;
                    out[static_cast<std::size_t>(x + s.w * (y + s.h * z))] +=
                        weights[g] * v.at(sx, sy, sz);
                }
    }
    v.voxels = std::move(out);
}

void bias_field(Volume& v, const std::vector<double>& coeffs, int order) {
    // Monomials x^i y^j z^k with i+j+k <= order, coordinates scaled to [-1,1].
    const Shape3 s = v.shape;
    std::size_t ci = 0;
    std::vector<std::array<int, 3>> monomials;
    for (int i = 0; i <= order; ++i)
        for (int j = 0; j + i <= order; ++j)
            for (int k = 0; k + j + i <= order; ++k)
                monomials.push_back({i, j, k});
    if (coeffs.size() != monomials.size())
        fail(Status::invalid_argument,
             "bias_field: expected " + std::to_string(monomials.size()) + " coefficients");
    for (std::int64_t z = 0; z < s.d; ++z)
        for (std::int64_t y = 0; y < s.h; ++y)
            for (std::int64_t x = 0; x < s.w; ++x) {
                const double xn = s.w > 1 ? 2.0 * x / (s.w - 1) - 1.0 : 0.0;
                const double yn = s.h > 1 ? 2.0 * y / (s.h - 1) - 1.0 : 0.0;
                const double zn = s.d > 1 ? 2.0 * z / (s.d - 1) - 1.0 : 0.0;
                double p = 0.0;
                ci = 0;
                for (const auto& mn : monomials) {
                    double term = coeffs[ci++];
                    for (int a = 0; a < mn[0]; ++a) term *= xn;
                    for (int a = 0; a < mn[1]; ++a) term *= yn;
                    for (int a = 0; a < mn[2]; ++a) term *= zn;
                    p += term;
                }
                v.at(x, y, z) *= std::exp(p);
            }
}

void add_gaussian_noise(Volume& v, double stddev, StreamRng& rng) {
    for (double& x : v.voxels) x += rng.normal(0.0, stddev);
}

Sample augment(const Sample& s, const AugmentationConfig& cfg, StreamRng& rng) {
    cfg.validate();
    if (s.mask && !(s.mask->shape == s.volume.shape))
        fail(Status::invalid_argument, "augment: volume/mask shape mismatch");
    Sample out = s;
    if (!cfg.any_enabled()) return out;

    if (cfg.enable_affine) {
        const std::array<double, 3> rot = {
            rng.uniform(-cfg.rotation_deg, cfg.rotation_deg),
            rng.uniform(-cfg.rotation_deg, cfg.rotation_deg),
            rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)};
        const double scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
        affine_transform(out.volume, out.mask ? &*out.mask : nullptr, rot, scale);
    }
    if (cfg.enable_flip) {
        for (int axis = 0; axis < 3; ++axis) {
            if (!cfg.flip_axes[static_cast<std::size_t>(axis)]) continue;
            if (rng.bernoulli(0.5)) {
                flip_axis(out.volume, axis);
                if (out.mask) flip_axis(*out.mask, axis);
            }
        }
    }
    if (cfg.enable_motion) {
        const int n = 1 + static_cast<int>(rng.uniform_int(cfg.motion_ghosts_max));
        std::vector<std::array<std::int64_t, 3>> shifts;
        std::vector<double> weights;
        for (int g = 0; g < n; ++g) {
            const std::int64_t span = 2 * cfg.motion_shift_voxels + 1;
            shifts.push_back({rng.uniform_int(span) - cfg.motion_shift_voxels,
                              rng.uniform_int(span) - cfg.motion_shift_voxels,
                              rng.uniform_int(span) - cfg.motion_shift_voxels});
            weights.push_back(rng.uniform(0.05, 0.3) / n);
        }
        motion_ghosts(out.volume, shifts, weights);
    }
    if (cfg.enable_bias_field) {
        std::size_t n_coeffs = 0;
        for (int i = 0; i <= cfg.bias_order; ++i)
            for (int j = 0; j + i <= cfg.bias_order; ++j)
                for (int k = 0; k + j + i <= cfg.bias_order; ++k) ++n_coeffs;
        std::vector<double> coeffs(n_coeffs);
        for (double& c : coeffs) c = rng.uniform(-cfg.bias_coeff_max, cfg.bias_coeff_max);
        bias_field(out.volume, coeffs, cfg.bias_order);
    }
    if (cfg.enable_noise) {
        const auto [mn, mx] =
            std::minmax_element(out.volume.voxels.begin(), out.volume.voxels.end());
        const double range = *mx - *mn;
        const double stddev = rng.uniform(0.0, cfg.noise_std_max) * (range > 0 ? range : 1.0);
        add_gaussian_noise(out.volume, stddev, rng);
    }
    return out;
}

} // namespace oodseg
