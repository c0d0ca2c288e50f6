#include "oodseg/network.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "oodseg/rng.hpp"

namespace oodseg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

constexpr std::int64_t kColChunk = 2048;

struct ConvGeom {
    std::int64_t b, in_c, iz, iy, ix;
    std::int64_t out_c, k, stride, pad;
    std::int64_t oz, oy, ox;
    std::int64_t in_spatial() const { return iz * iy * ix; }
    std::int64_t out_spatial() const { return oz * oy * ox; }
    std::int64_t cols() const { return in_c * k * k * k; }
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.ndim() != 5 || w.ndim() != 5)
        fail(Status::invalid_argument, "conv3d: expected 5-d input and weight");
    ConvGeom g;
    g.b = x.dim(0);
    g.in_c = x.dim(1);
    g.iz = x.dim(2);
    g.iy = x.dim(3);
    g.ix = x.dim(4);
    g.out_c = w.dim(0);
    g.k = w.dim(2);
    g.stride = stride;
    g.pad = pad;
    if (w.dim(1) != g.in_c || w.dim(3) != g.k || w.dim(4) != g.k)
        fail(Status::invalid_argument, "conv3d: weight shape " + shape_string(w) +
                                           " incompatible with input " + shape_string(x));
    g.oz = (g.iz + 2 * pad - g.k) / stride + 1;
    g.oy = (g.iy + 2 * pad - g.k) / stride + 1;
    g.ox = (g.ix + 2 * pad - g.k) / stride + 1;
    if (g.oz <= 0 || g.oy <= 0 || g.ox <= 0)
        fail(Status::invalid_argument, "conv3d: non-positive output extent");
    return g;
}

// Column coordinates for one chunk of output voxels.
void decode_columns(const ConvGeom& g, std::int64_t n0, std::int64_t nc,
                    std::vector<std::int64_t>& oz, std::vector<std::int64_t>& oy,
                    std::vector<std::int64_t>& ox) {
    oz.resize(static_cast<std::size_t>(nc));
    oy.resize(static_cast<std::size_t>(nc));
    ox.resize(static_cast<std::size_t>(nc));
    for (std::int64_t n = 0; n < nc; ++n) {
        const std::int64_t v = n0 + n;
        oz[static_cast<std::size_t>(n)] = v / (g.oy * g.ox);
        const std::int64_t rem = v % (g.oy * g.ox);
        oy[static_cast<std::size_t>(n)] = rem / g.ox;
        ox[static_cast<std::size_t>(n)] = rem % g.ox;
    }
}

void im2col_chunk(const ConvGeom& g, const double* x, std::int64_t n0, std::int64_t nc,
                  const std::vector<std::int64_t>& oz, const std::vector<std::int64_t>& oy,
                  const std::vector<std::int64_t>& ox, double* col) {
    (void)n0;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < g.in_c; ++ci) {
        const double* xc = x + ci * g.in_spatial();
        for (std::int64_t kz = 0; kz < g.k; ++kz)
            for (std::int64_t ky = 0; ky < g.k; ++ky)
                for (std::int64_t kx = 0; kx < g.k; ++kx, ++row) {
                    double* dst = col + row * nc;
                    for (std::int64_t n = 0; n < nc; ++n) {
                        const std::int64_t iz = oz[static_cast<std::size_t>(n)] * g.stride - g.pad + kz;
                        const std::int64_t iy = oy[static_cast<std::size_t>(n)] * g.stride - g.pad + ky;
                        const std::int64_t ix = ox[static_cast<std::size_t>(n)] * g.stride - g.pad + kx;
                        dst[n] = (iz < 0 || iy < 0 || ix < 0 || iz >= g.iz || iy >= g.iy ||
                                  ix >= g.ix)
                                     ? 0.0
                                     : xc[ix + g.ix * (iy + g.iy * iz)];
                    }
                }
    }
}

void col2im_add_chunk(const ConvGeom& g, const double* col, std::int64_t nc,
                      const std::vector<std::int64_t>& oz,
                      const std::vector<std::int64_t>& oy,
                      const std::vector<std::int64_t>& ox, double* dx) {
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < g.in_c; ++ci) {
        double* xc = dx + ci * g.in_spatial();
        for (std::int64_t kz = 0; kz < g.k; ++kz)
            for (std::int64_t ky = 0; ky < g.k; ++ky)
                for (std::int64_t kx = 0; kx < g.k; ++kx, ++row) {
                    const double* src = col + row * nc;
                    for (std::int64_t n = 0; n < nc; ++n) {
                        const std::int64_t iz = oz[static_cast<std::size_t>(n)] * g.stride - g.pad + kz;
                        const std::int64_t iy = oy[static_cast<std::size_t>(n)] * g.stride - g.pad + ky;
                        const std::int64_t ix = ox[static_cast<std::size_t>(n)] * g.stride - g.pad + kx;
                        if (iz < 0 || iy < 0 || ix < 0 || iz >= g.iz || iy >= g.iy ||
                            ix >= g.ix)
                            continue;
                        xc[ix + g.ix * (iy + g.iy * iz)] += src[n];
                    }
                }
    }
}

} // namespace

Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                      int pad) {
    const ConvGeom g = conv_geometry(x, w, stride, pad);
    if (b.numel() != g.out_c)
        fail(Status::invalid_argument, "conv3d: bias size mismatch");
    Tensor y({g.b, g.out_c, g.oz, g.oy, g.ox});
    const std::int64_t n_total = g.out_spatial();
    const std::int64_t kcols = g.cols();

    // 1x1x1 convolution is a plain channel mix; skip the im2col machinery.
    if (g.k == 1 && g.stride == 1) {
        Eigen::Map<const RowMat> wm(w.ptr(), g.out_c, g.in_c);
        for (std::int64_t s = 0; s < g.b; ++s) {
            Eigen::Map<const RowMat> xm(x.ptr() + s * g.in_c * n_total, g.in_c, n_total);
            Eigen::Map<RowMat> ym(y.ptr() + s * g.out_c * n_total, g.out_c, n_total);
            ym.noalias() = wm * xm;
            for (std::int64_t c = 0; c < g.out_c; ++c) ym.row(c).array() += b[c];
        }
        return y;
    }

    std::vector<double> col(static_cast<std::size_t>(kcols * std::min(kColChunk, n_total)));
    std::vector<std::int64_t> oz, oy, ox;
    Eigen::Map<const RowMat> wm(w.ptr(), g.out_c, kcols);
    for (std::int64_t s = 0; s < g.b; ++s) {
        const double* xs = x.ptr() + s * g.in_c * g.in_spatial();
        double* ys = y.ptr() + s * g.out_c * n_total;
        for (std::int64_t n0 = 0; n0 < n_total; n0 += kColChunk) {
            const std::int64_t nc = std::min(kColChunk, n_total - n0);
            decode_columns(g, n0, nc, oz, oy, ox);
            im2col_chunk(g, xs, n0, nc, oz, oy, ox, col.data());
            Eigen::Map<const RowMat> cm(col.data(), kcols, nc);
            StridedMap ym(ys + n0, g.out_c, nc, Eigen::OuterStride<>(n_total));
            ym.noalias() = wm * cm;
        }
        for (std::int64_t c = 0; c < g.out_c; ++c) {
            double* row = ys + c * n_total;
            for (std::int64_t n = 0; n < n_total; ++n) row[n] += b[c];
        }
    }
    return y;
}

void conv3d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, int stride,
                     int pad, Tensor* dx, Tensor* dw, Tensor* db) {
    const ConvGeom g = conv_geometry(x, w, stride, pad);
    const std::int64_t n_total = g.out_spatial();
    const std::int64_t kcols = g.cols();
    if (dy.dim(0) != g.b || dy.dim(1) != g.out_c || dy.dim(2) != g.oz ||
        dy.dim(3) != g.oy || dy.dim(4) != g.ox)
        fail(Status::invalid_argument, "conv3d_backward: dy shape mismatch");

    if (db) {
        for (std::int64_t s = 0; s < g.b; ++s)
            for (std::int64_t c = 0; c < g.out_c; ++c) {
                const double* row = dy.ptr() + (s * g.out_c + c) * n_total;
                double acc = 0.0;
                for (std::int64_t n = 0; n < n_total; ++n) acc += row[n];
                (*db)[c] += acc;
            }
    }

    if (g.k == 1 && g.stride == 1) {
        Eigen::Map<const RowMat> wm(w.ptr(), g.out_c, g.in_c);
        for (std::int64_t s = 0; s < g.b; ++s) {
            Eigen::Map<const RowMat> xm(x.ptr() + s * g.in_c * n_total, g.in_c, n_total);
            Eigen::Map<const RowMat> dym(dy.ptr() + s * g.out_c * n_total, g.out_c,
                                         n_total);
            if (dw) {
                Eigen::Map<RowMat> dwm(dw->ptr(), g.out_c, g.in_c);
                dwm.noalias() += dym * xm.transpose();
            }
            if (dx) {
                Eigen::Map<RowMat> dxm(dx->ptr() + s * g.in_c * n_total, g.in_c, n_total);
                dxm.noalias() += wm.transpose() * dym;
            }
        }
        return;
    }

    std::vector<double> col(static_cast<std::size_t>(kcols * std::min(kColChunk, n_total)));
    std::vector<double> dcol;
    if (dx) dcol.resize(col.size());
    std::vector<std::int64_t> oz, oy, ox;
    Eigen::Map<const RowMat> wm(w.ptr(), g.out_c, kcols);
    for (std::int64_t s = 0; s < g.b; ++s) {
        const double* xs = x.ptr() + s * g.in_c * g.in_spatial();
        const double* dys = dy.ptr() + s * g.out_c * n_total;
        for (std::int64_t n0 = 0; n0 < n_total; n0 += kColChunk) {
            const std::int64_t nc = std::min(kColChunk, n_total - n0);
            decode_columns(g, n0, nc, oz, oy, ox);
            ConstStridedMap dym(dys + n0, g.out_c, nc, Eigen::OuterStride<>(n_total));
            if (dw) {
                im2col_chunk(g, xs, n0, nc, oz, oy, ox, col.data());
                Eigen::Map<const RowMat> cm(col.data(), kcols, nc);
                Eigen::Map<RowMat> dwm(dw->ptr(), g.out_c, kcols);
                dwm.noalias() += dym * cm.transpose();
            }
            if (dx) {
                Eigen::Map<RowMat> dcm(dcol.data(), kcols, nc);
                dcm.noalias() = wm.transpose() * dym;
                col2im_add_chunk(g, dcol.data(), nc, oz, oy, ox,
                                 dx->ptr() + s * g.in_c * g.in_spatial());
            }
        }
    }
}

Tensor upsample_nearest2(const Tensor& x) {
    const std::int64_t b = x.dim(0), c = x.dim(1), z = x.dim(2), y = x.dim(3),
                       xx = x.dim(4);
    Tensor out({b, c, z * 2, y * 2, xx * 2});
    for (std::int64_t bc = 0; bc < b * c; ++bc) {
        const double* src = x.ptr() + bc * z * y * xx;
        double* dst = out.ptr() + bc * 8 * z * y * xx;
        for (std::int64_t iz = 0; iz < 2 * z; ++iz)
            for (std::int64_t iy = 0; iy < 2 * y; ++iy) {
                const double* srow = src + (iz / 2) * y * xx + (iy / 2) * xx;
                double* drow = dst + iz * (2 * y) * (2 * xx) + iy * (2 * xx);
                for (std::int64_t ix = 0; ix < 2 * xx; ++ix) drow[ix] = srow[ix / 2];
            }
    }
    return out;
}

Tensor upsample_nearest2_backward(const Tensor& dy) {
    const std::int64_t b = dy.dim(0), c = dy.dim(1), z = dy.dim(2) / 2, y = dy.dim(3) / 2,
                       xx = dy.dim(4) / 2;
    Tensor dx({b, c, z, y, xx});
    for (std::int64_t bc = 0; bc < b * c; ++bc) {
        const double* src = dy.ptr() + bc * 8 * z * y * xx;
        double* dst = dx.ptr() + bc * z * y * xx;
        for (std::int64_t iz = 0; iz < 2 * z; ++iz)
            for (std::int64_t iy = 0; iy < 2 * y; ++iy) {
                const double* srow = src + iz * (2 * y) * (2 * xx) + iy * (2 * xx);
                double* drow = dst + (iz / 2) * y * xx + (iy / 2) * xx;
                for (std::int64_t ix = 0; ix < 2 * xx; ++ix) drow[ix / 2] += srow[ix];
            }
    }
    return dx;
}

namespace {

constexpr double kNormEps = 1e-5;

// Instance norm + ReLU applied in place on the conv output; fills xhat/invstd.
void norm_relu_forward(Tensor& t, const Tensor& gamma, const Tensor& beta,
                       Tensor& xhat, std::vector<double>& invstd) {
    const std::int64_t b = t.dim(0), c = t.dim(1);
    const std::int64_t sp = t.numel() / (b * c);
    xhat = Tensor::zeros(t.dims);
    invstd.assign(static_cast<std::size_t>(b * c), 0.0);
    for (std::int64_t bc = 0; bc < b * c; ++bc) {
        double* v = t.ptr() + bc * sp;
        double* xh = xhat.ptr() + bc * sp;
        const double g = gamma[bc % c], be = beta[bc % c];
        double mean = 0.0;
        for (std::int64_t i = 0; i < sp; ++i) mean += v[i];
        mean /= static_cast<double>(sp);
        double var = 0.0;
        for (std::int64_t i = 0; i < sp; ++i) var += (v[i] - mean) * (v[i] - mean);
        var /= static_cast<double>(sp);
        const double is = 1.0 / std::sqrt(var + kNormEps);
        invstd[static_cast<std::size_t>(bc)] = is;
        for (std::int64_t i = 0; i < sp; ++i) {
            const double h = (v[i] - mean) * is;
            xh[i] = h;
            const double out = g * h + be;
            v[i] = out > 0.0 ? out : 0.0;
        }
    }
}

// dy is the gradient at the block output (post-ReLU); returns gradient at the
// conv output and accumulates dgamma/dbeta when wanted.
Tensor norm_relu_backward(const Tensor& dy, const Tensor& y, const Tensor& xhat,
                          const std::vector<double>& invstd, const Tensor& gamma,
                          Tensor* dgamma, Tensor* dbeta) {
    const std::int64_t b = dy.dim(0), c = dy.dim(1);
    const std::int64_t sp = dy.numel() / (b * c);
    Tensor dx = Tensor::zeros(dy.dims);
    for (std::int64_t bc = 0; bc < b * c; ++bc) {
        const double* dyv = dy.ptr() + bc * sp;
        const double* yv = y.ptr() + bc * sp;
        const double* xh = xhat.ptr() + bc * sp;
        double* dxv = dx.ptr() + bc * sp;
        const double g = gamma[bc % c];
        const double is = invstd[static_cast<std::size_t>(bc)];

        double sum_dh = 0.0, sum_dh_xh = 0.0, sum_dy = 0.0, sum_dy_xh = 0.0;
        for (std::int64_t i = 0; i < sp; ++i) {
            const double dyr = yv[i] > 0.0 ? dyv[i] : 0.0; // ReLU gate
            const double dh = dyr * g;
            sum_dy += dyr;
            sum_dy_xh += dyr * xh[i];
            sum_dh += dh;
            sum_dh_xh += dh * xh[i];
        }
        if (dgamma) (*dgamma)[bc % c] += sum_dy_xh;
        if (dbeta) (*dbeta)[bc % c] += sum_dy;
        const double inv_sp = 1.0 / static_cast<double>(sp);
        for (std::int64_t i = 0; i < sp; ++i) {
            const double dyr = yv[i] > 0.0 ? dyv[i] : 0.0;
            const double dh = dyr * g;
            dxv[i] = is * (dh - inv_sp * sum_dh - xh[i] * inv_sp * sum_dh_xh);
        }
    }
    return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const std::int64_t sp = a.dim(2) * a.dim(3) * a.dim(4);
    Tensor out({a.dim(0), a.dim(1) + b.dim(1), a.dim(2), a.dim(3), a.dim(4)});
    for (std::int64_t s = 0; s < a.dim(0); ++s) {
        std::memcpy(out.ptr() + s * (a.dim(1) + b.dim(1)) * sp, a.ptr() + s * a.dim(1) * sp,
                    static_cast<std::size_t>(a.dim(1) * sp) * sizeof(double));
        std::memcpy(out.ptr() + (s * (a.dim(1) + b.dim(1)) + a.dim(1)) * sp,
                    b.ptr() + s * b.dim(1) * sp,
                    static_cast<std::size_t>(b.dim(1) * sp) * sizeof(double));
    }
    return out;
}

void split_channels(const Tensor& cat, std::int64_t c_a, Tensor& da, Tensor& db) {
    const std::int64_t c_total = cat.dim(1), c_b = c_total - c_a;
    const std::int64_t sp = cat.dim(2) * cat.dim(3) * cat.dim(4);
    da = Tensor({cat.dim(0), c_a, cat.dim(2), cat.dim(3), cat.dim(4)});
    db = Tensor({cat.dim(0), c_b, cat.dim(2), cat.dim(3), cat.dim(4)});
    for (std::int64_t s = 0; s < cat.dim(0); ++s) {
        std::memcpy(da.ptr() + s * c_a * sp, cat.ptr() + s * c_total * sp,
                    static_cast<std::size_t>(c_a * sp) * sizeof(double));
        std::memcpy(db.ptr() + s * c_b * sp, cat.ptr() + (s * c_total + c_a) * sp,
                    static_cast<std::size_t>(c_b * sp) * sizeof(double));
    }
}

} // namespace

const char* to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::repr: return "repr";
        case ParamGroup::seg: return "seg";
        case ParamGroup::dp: return "dp";
    }
    return "?";
}

void ArchConfig::validate() const {
    if (in_channels < 1) fail(Status::invalid_config, "arch: in_channels must be >= 1");
    if (levels < 1) fail(Status::invalid_config, "arch: levels must be >= 1");
    if (base_channels < 1) fail(Status::invalid_config, "arch: base_channels must be >= 1");
    if (n_domains < 2) fail(Status::invalid_config, "arch: n_domains must be >= 2");
    const std::int64_t trunk_div = std::int64_t(1) << levels;
    const std::int64_t div = std::max<std::int64_t>(trunk_div, 8); // dp head strides 3x
    for (std::int64_t extent : {input_shape.w, input_shape.h, input_shape.d}) {
        if (extent <= 0 || extent % div != 0)
            fail(Status::invalid_config,
                 "arch: input shape " + to_string(input_shape) +
                     " must be divisible by " + std::to_string(div) + " per axis");
    }
}

void GradBuffer::zero() {
    for (auto& g : grads) g.fill(0.0);
}

double GradBuffer::group_sq_norm(ParamGroup g, const std::vector<ParamTensor>& params) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].group == g) acc += grads[i].sq_norm();
    return acc;
}

UNet3D::ConvBlock UNet3D::make_block(const std::string& name, ParamGroup group, int in_c,
                                     int out_c, int kernel, int stride, bool norm_relu,
                                     std::uint64_t seed) {
    ConvBlock blk;
    blk.name = name;
    blk.group = group;
    blk.in_c = in_c;
    blk.out_c = out_c;
    blk.kernel = kernel;
    blk.stride = stride;
    blk.pad = kernel / 2;
    blk.norm_relu = norm_relu;

    auto add_param = [&](const std::string& pname, Tensor value) {
        params_.push_back({pname, group, std::move(value)});
        return static_cast<int>(params_.size() - 1);
    };

    // He-normal fan-in initialization, keyed by tensor name so the draw does
    // not depend on construction order.
    Tensor w({out_c, in_c, kernel, kernel, kernel});
    StreamRng rng = StreamRng::keyed(seed, "init", hash_string(name + ".conv.w"));
    const double std_w = std::sqrt(2.0 / (in_c * kernel * kernel * kernel));
    for (double& v : w.data) v = rng.normal(0.0, std_w);
    blk.w = add_param(name + ".conv.w", std::move(w));
    blk.b = add_param(name + ".conv.b", Tensor::zeros({out_c}));
    if (norm_relu) {
        blk.gamma = add_param(name + ".norm.gamma", Tensor::full({out_c}, 1.0));
        blk.beta = add_param(name + ".norm.beta", Tensor::zeros({out_c}));
    }
    return blk;
}

UNet3D::UNet3D(const ArchConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const int C = cfg_.base_channels;
    const int L = cfg_.levels;

    stem_ = make_block("repr.stem", ParamGroup::repr, cfg_.in_channels, C, 3, 1, true, seed);
    for (int l = 1; l <= L; ++l) {
        const int cin = C << (l - 1), cout = C << l;
        down_.push_back(make_block("repr.down" + std::to_string(l), ParamGroup::repr, cin,
                                   cout, 3, 2, true, seed));
        enc_.push_back(make_block("repr.enc" + std::to_string(l), ParamGroup::repr, cout,
                                  cout, 3, 1, true, seed));
    }
    for (int l = L; l >= 1; --l) {
        const int cin = (C << l) + (C << (l - 1)); // upsampled + skip
        const int cout = C << (l - 1);
        dec_.push_back(make_block("repr.dec" + std::to_string(l), ParamGroup::repr, cin,
                                  cout, 3, 1, true, seed));
    }
    seg_out_ = make_block("seg.out", ParamGroup::seg, C, 1, 1, 1, false, seed);

    int c = C;
    for (int i = 1; i <= 3; ++i) {
        dp_blocks_.push_back(make_block("dp.c" + std::to_string(i), ParamGroup::dp, c,
                                        2 * c, 3, 2, true, seed));
        c *= 2;
    }
    Tensor fcw({cfg_.n_domains, c});
    StreamRng rng = StreamRng::keyed(seed, "init", hash_string("dp.fc.w"));
    const double std_w = std::sqrt(1.0 / c);
    for (double& v : fcw.data) v = rng.normal(0.0, std_w);
    params_.push_back({"dp.fc.w", ParamGroup::dp, std::move(fcw)});
    dp_fc_w_ = static_cast<int>(params_.size() - 1);
    params_.push_back({"dp.fc.b", ParamGroup::dp, Tensor::zeros({cfg_.n_domains})});
    dp_fc_b_ = static_cast<int>(params_.size() - 1);
}

int UNet3D::param_index(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (params_[i].name == name) return static_cast<int>(i);
    fail(Status::invalid_argument, "unknown parameter " + name);
}

std::vector<std::string> UNet3D::op_kinds() const {
    std::vector<std::string> ops;
    auto block_ops = [&](const ConvBlock& blk) {
        ops.push_back(blk.kernel == 1 ? "conv1" : "conv3");
        if (blk.norm_relu) {
            ops.push_back("instance_norm");
            ops.push_back("relu");
        }
    };
    block_ops(stem_);
    for (int l = 0; l < cfg_.levels; ++l) {
        block_ops(down_[static_cast<std::size_t>(l)]);
        block_ops(enc_[static_cast<std::size_t>(l)]);
    }
    for (const auto& blk : dec_) {
        ops.push_back("upsample_nearest2");
        ops.push_back("concat");
        block_ops(blk);
    }
    block_ops(seg_out_);
    for (const auto& blk : dp_blocks_) block_ops(blk);
    ops.push_back("global_avg_pool");
    ops.push_back("linear");
    return ops;
}

int UNet3D::downsample_stages() const { return static_cast<int>(down_.size()); }
int UNet3D::upsample_stages() const { return static_cast<int>(dec_.size()); }

GradBuffer UNet3D::make_grad_buffer(std::array<bool, 3> want) const {
    GradBuffer gb;
    gb.want = want;
    gb.grads.reserve(params_.size());
    for (const auto& p : params_) gb.grads.push_back(Tensor::zeros(p.value.dims));
    return gb;
}

Tensor UNet3D::block_forward(const ConvBlock& blk, const Tensor& x,
                             BlockTrace& trace) const {
    trace.x = x;
    Tensor y = conv3d_forward(x, params_[static_cast<std::size_t>(blk.w)].value,
                              params_[static_cast<std::size_t>(blk.b)].value, blk.stride,
                              blk.pad);
    if (blk.norm_relu)
        norm_relu_forward(y, params_[static_cast<std::size_t>(blk.gamma)].value,
                          params_[static_cast<std::size_t>(blk.beta)].value, trace.xhat,
                          trace.invstd);
    trace.y = y;
    return y;
}

Tensor UNet3D::block_backward(const ConvBlock& blk, const Tensor& dy,
                              const BlockTrace& trace, GradBuffer& grads,
                              bool need_dx) const {
    const bool want = grads.wants(blk.group);
    Tensor dconv;
    if (blk.norm_relu) {
        dconv = norm_relu_backward(
            dy, trace.y, trace.xhat, trace.invstd,
            params_[static_cast<std::size_t>(blk.gamma)].value,
            want ? &grads.grads[static_cast<std::size_t>(blk.gamma)] : nullptr,
            want ? &grads.grads[static_cast<std::size_t>(blk.beta)] : nullptr);
    } else {
        dconv = dy;
    }
    Tensor dx;
    if (need_dx) dx = Tensor::zeros(trace.x.dims);
    conv3d_backward(trace.x, params_[static_cast<std::size_t>(blk.w)].value, dconv,
                    blk.stride, blk.pad, need_dx ? &dx : nullptr,
                    want ? &grads.grads[static_cast<std::size_t>(blk.w)] : nullptr,
                    want ? &grads.grads[static_cast<std::size_t>(blk.b)] : nullptr);
    return dx;
}

const Tensor& UNet3D::forward_features(const Tensor& images, UNetTrace& trace) const {
    if (images.ndim() != 5 || images.dim(1) != cfg_.in_channels ||
        images.dim(2) != cfg_.input_shape.d || images.dim(3) != cfg_.input_shape.h ||
        images.dim(4) != cfg_.input_shape.w)
        fail(Status::invalid_argument,
             "forward_features: expected (B," + std::to_string(cfg_.in_channels) + "," +
                 std::to_string(cfg_.input_shape.d) + "," +
                 std::to_string(cfg_.input_shape.h) + "," +
                 std::to_string(cfg_.input_shape.w) + "), got " + shape_string(images));
    const int L = cfg_.levels;
    trace.down.resize(static_cast<std::size_t>(L));
    trace.enc.resize(static_cast<std::size_t>(L));
    trace.dec.resize(static_cast<std::size_t>(L));

    Tensor cur = block_forward(stem_, images, trace.stem);
    for (int l = 0; l < L; ++l) {
        cur = block_forward(down_[static_cast<std::size_t>(l)], cur,
                            trace.down[static_cast<std::size_t>(l)]);
        cur = block_forward(enc_[static_cast<std::size_t>(l)], cur,
                            trace.enc[static_cast<std::size_t>(l)]);
    }
    for (int i = 0; i < L; ++i) {
        const int level = L - i; // dec_[i] consumes the level-`level` upsample
        const Tensor up = upsample_nearest2(cur);
        const Tensor& skip =
            level >= 2 ? trace.enc[static_cast<std::size_t>(level - 2)].y : trace.stem.y;
        const Tensor cat = concat_channels(up, skip);
        cur = block_forward(dec_[static_cast<std::size_t>(i)], cat,
                            trace.dec[static_cast<std::size_t>(i)]);
    }
    trace.features = cur;
    return trace.features;
}

Tensor UNet3D::forward_segment(const Tensor& features) const {
    if (features.ndim() != 5 || features.dim(1) != cfg_.base_channels)
        fail(Status::invalid_argument, "forward_segment: bad features shape " +
                                           shape_string(features));
    return conv3d_forward(features, params_[static_cast<std::size_t>(seg_out_.w)].value,
                          params_[static_cast<std::size_t>(seg_out_.b)].value, 1, 0);
}

Tensor UNet3D::forward_domain(const Tensor& features, DomainTrace& trace) const {
    if (features.ndim() != 5 || features.dim(1) != cfg_.base_channels)
        fail(Status::invalid_argument, "forward_domain: bad features shape " +
                                           shape_string(features));
    trace.blocks.resize(dp_blocks_.size());
    Tensor cur = features;
    for (std::size_t i = 0; i < dp_blocks_.size(); ++i)
        cur = block_forward(dp_blocks_[i], cur, trace.blocks[i]);

    const std::int64_t b = cur.dim(0), c = cur.dim(1);
    const std::int64_t sp = cur.numel() / (b * c);
    trace.pooled = Tensor({b, c});
    for (std::int64_t bc = 0; bc < b * c; ++bc) {
        const double* v = cur.ptr() + bc * sp;
        double acc = 0.0;
        for (std::int64_t i = 0; i < sp; ++i) acc += v[i];
        trace.pooled[bc] = acc / static_cast<double>(sp);
    }

    const Tensor& w = params_[static_cast<std::size_t>(dp_fc_w_)].value;
    const Tensor& bias = params_[static_cast<std::size_t>(dp_fc_b_)].value;
    Tensor logits({b, static_cast<std::int64_t>(cfg_.n_domains)});
    Eigen::Map<const RowMat> xm(trace.pooled.ptr(), b, c);
    Eigen::Map<const RowMat> wm(w.ptr(), cfg_.n_domains, c);
    Eigen::Map<RowMat> ym(logits.ptr(), b, cfg_.n_domains);
    ym.noalias() = xm * wm.transpose();
    for (std::int64_t s = 0; s < b; ++s)
        for (int d = 0; d < cfg_.n_domains; ++d) logits[s * cfg_.n_domains + d] += bias[d];
    return logits;
}

Tensor UNet3D::backward_trunk(const Tensor& dfeatures, const UNetTrace& trace,
                              GradBuffer& grads) const {
    const int L = cfg_.levels;
    const int C = cfg_.base_channels;

    Tensor dcur = dfeatures;
    std::vector<Tensor> dskip(static_cast<std::size_t>(L)); // level-1 .. level-L-1 plus stem at [0]
    // Decoder blocks in reverse construction order (shallowest first).
    for (int i = L - 1; i >= 0; --i) {
        const int level = L - i;
        Tensor dcat = block_backward(dec_[static_cast<std::size_t>(i)], dcur,
                                     trace.dec[static_cast<std::size_t>(i)], grads);
        Tensor dup, ds;
        split_channels(dcat, static_cast<std::int64_t>(C) << level, dup, ds);
        dskip[static_cast<std::size_t>(level - 1)] = std::move(ds);
        dcur = upsample_nearest2_backward(dup);
    }
    // dcur now sits at the deepest encoder output.
    for (int l = L; l >= 1; --l) {
        Tensor dd = block_backward(enc_[static_cast<std::size_t>(l - 1)], dcur,
                                   trace.enc[static_cast<std::size_t>(l - 1)], grads);
        Tensor dprev = block_backward(down_[static_cast<std::size_t>(l - 1)], dd,
                                      trace.down[static_cast<std::size_t>(l - 1)], grads);
        if (l >= 2) {
            dcur = std::move(dskip[static_cast<std::size_t>(l - 1)]);
            axpy(1.0, dprev, dcur);
        } else {
            dcur = std::move(dprev);
            axpy(1.0, dskip[0], dcur);
        }
    }
    return block_backward(stem_, dcur, trace.stem, grads, /*need_dx=*/false);
}

void UNet3D::backward_segment(const Tensor& dlogits, const UNetTrace& trace,
                              GradBuffer& grads) const {
    if (grads.wants(ParamGroup::dp))
        fail(Status::invalid_argument,
             "backward_segment: segmentation loss is not connected to group dp");
    const bool through_trunk = grads.wants(ParamGroup::repr);
    const bool want_seg = grads.wants(ParamGroup::seg);
    Tensor dfeat;
    if (through_trunk) dfeat = Tensor::zeros(trace.features.dims);
    conv3d_backward(trace.features, params_[static_cast<std::size_t>(seg_out_.w)].value,
                    dlogits, 1, 0, through_trunk ? &dfeat : nullptr,
                    want_seg ? &grads.grads[static_cast<std::size_t>(seg_out_.w)] : nullptr,
                    want_seg ? &grads.grads[static_cast<std::size_t>(seg_out_.b)] : nullptr);
    if (through_trunk) backward_trunk(dfeat, trace, grads);
}

void UNet3D::backward_domain(const Tensor& dlogits, const UNetTrace& trace,
                             const DomainTrace& dtrace, GradBuffer& grads) const {
    if (grads.wants(ParamGroup::seg))
        fail(Status::invalid_argument,
             "backward_domain: domain losses are not connected to group seg");
    const bool want_dp = grads.wants(ParamGroup::dp);
    const bool through_trunk = grads.wants(ParamGroup::repr);

    const std::int64_t b = dlogits.dim(0);
    const std::int64_t c = dtrace.pooled.dim(1);
    const Tensor& w = params_[static_cast<std::size_t>(dp_fc_w_)].value;

    Eigen::Map<const RowMat> dym(dlogits.ptr(), b, cfg_.n_domains);
    if (want_dp) {
        Eigen::Map<RowMat> dwm(grads.grads[static_cast<std::size_t>(dp_fc_w_)].ptr(),
                               cfg_.n_domains, c);
        Eigen::Map<const RowMat> xm(dtrace.pooled.ptr(), b, c);
        dwm.noalias() += dym.transpose() * xm;
        for (std::int64_t s = 0; s < b; ++s)
            for (int d = 0; d < cfg_.n_domains; ++d)
                grads.grads[static_cast<std::size_t>(dp_fc_b_)][d] +=
                    dlogits[s * cfg_.n_domains + d];
    }
    Tensor dpooled({b, c});
    Eigen::Map<RowMat> dpm(dpooled.ptr(), b, c);
    Eigen::Map<const RowMat> wm(w.ptr(), cfg_.n_domains, c);
    dpm.noalias() = dym * wm;

    // Global average pool backward.
    const Tensor& deep = dtrace.blocks.back().y;
    const std::int64_t sp = deep.numel() / (b * c);
    Tensor dcur(deep.dims);
    for (std::int64_t bc = 0; bc < b * c; ++bc) {
        const double g = dpooled[bc] / static_cast<double>(sp);
        double* v = dcur.ptr() + bc * sp;
        for (std::int64_t i = 0; i < sp; ++i) v[i] = g;
    }
    for (std::size_t i = dp_blocks_.size(); i-- > 0;) {
        const bool need_dx = through_trunk || i > 0;
        dcur = block_backward(dp_blocks_[i], dcur, dtrace.blocks[i], grads, need_dx);
    }
    if (through_trunk) backward_trunk(dcur, trace, grads);
}

// ---- checkpoint I/O ("OODCKPT1") -------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'O', 'O', 'D', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& path) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) fail(Status::io_error, path + ": truncated checkpoint");
    return v;
}

} // namespace

void UNet3D::save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail(Status::io_error, path + ": cannot open for writing");
    os.write(kCkptMagic, 8);
    write_pod<std::uint32_t>(os, 1); // version
    write_pod<std::int32_t>(os, cfg_.in_channels);
    write_pod<std::int32_t>(os, cfg_.levels);
    write_pod<std::int32_t>(os, cfg_.base_channels);
    write_pod<std::int32_t>(os, cfg_.n_domains);
    write_pod<std::int64_t>(os, cfg_.input_shape.w);
    write_pod<std::int64_t>(os, cfg_.input_shape.h);
    write_pod<std::int64_t>(os, cfg_.input_shape.d);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params_.size()));
    for (const auto& p : params_) {
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(p.group));
        write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(p.value.ndim()));
        for (std::int64_t d : p.value.dims) write_pod<std::int64_t>(os, d);
        os.write(reinterpret_cast<const char*>(p.value.ptr()),
                 static_cast<std::streamsize>(p.value.numel() * sizeof(double)));
    }
    if (!os) fail(Status::io_error, path + ": write failed");
}

UNet3D UNet3D::load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(Status::io_error, path + ": cannot open");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        fail(Status::io_error, path + ": bad checkpoint magic");
    const auto version = read_pod<std::uint32_t>(is, path);
    if (version != 1)
        fail(Status::io_error, path + ": unsupported checkpoint version " +
                                   std::to_string(version));
    ArchConfig cfg;
    cfg.in_channels = read_pod<std::int32_t>(is, path);
    cfg.levels = read_pod<std::int32_t>(is, path);
    cfg.base_channels = read_pod<std::int32_t>(is, path);
    cfg.n_domains = read_pod<std::int32_t>(is, path);
    cfg.input_shape.w = read_pod<std::int64_t>(is, path);
    cfg.input_shape.h = read_pod<std::int64_t>(is, path);
    cfg.input_shape.d = read_pod<std::int64_t>(is, path);

    UNet3D model(cfg, /*seed=*/0);
    const auto n_tensors = read_pod<std::uint32_t>(is, path);
    if (n_tensors != model.params_.size())
        fail(Status::io_error, path + ": tensor count mismatch");
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const auto name_len = read_pod<std::uint16_t>(is, path);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto group = read_pod<std::uint8_t>(is, path);
        const auto ndim = read_pod<std::uint8_t>(is, path);
        std::vector<std::int64_t> dims(ndim);
        for (auto& d : dims) d = read_pod<std::int64_t>(is, path);
        const int idx = model.param_index(name);
        ParamTensor& p = model.params_[static_cast<std::size_t>(idx)];
        if (static_cast<std::uint8_t>(p.group) != group)
            fail(Status::io_error, path + ": group tag mismatch for " + name);
        if (p.value.dims != dims)
            fail(Status::io_error, path + ": shape mismatch for " + name);
        is.read(reinterpret_cast<char*>(p.value.ptr()),
                static_cast<std::streamsize>(p.value.numel() * sizeof(double)));
        if (!is) fail(Status::io_error, path + ": truncated tensor data for " + name);
        if (!p.value.all_finite())
            fail(Status::io_error, path + ": non-finite values in " + name);
    }
    return model;
}

} // namespace oodseg
