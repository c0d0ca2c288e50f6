#pragma once

#include <array>
#include <string>
#include <vector>

#include "oodseg/common.hpp"
#include "oodseg/tensor.hpp"

namespace oodseg {

/// Parameter partition of the two-headed network: shared U-Net trunk (repr),
/// segmentor output convolution (seg), domain-predictor head (dp).
enum class ParamGroup : int { repr = 0, seg = 1, dp = 2 };

const char* to_string(ParamGroup g);

struct ArchConfig {
    int in_channels = 1;
    int levels = 3;
    int base_channels = 8;
    int n_domains = 2;
    Shape3 input_shape;

    void validate() const;
    bool operator==(const ArchConfig&) const = default;
};

struct ParamTensor {
    std::string name;
    ParamGroup group;
    Tensor value;
};

/// Gradient accumulator parallel to the model's parameter list. Only groups
/// flagged in `want` receive gradients; the others stay untouched.
struct GradBuffer {
    std::vector<Tensor> grads;
    std::array<bool, 3> want = {true, true, true};

    bool wants(ParamGroup g) const { return want[static_cast<int>(g)]; }
    void zero();
    double group_sq_norm(ParamGroup g, const std::vector<ParamTensor>& params) const;
};

// Per-block forward cache; inputs and normalized values are retained for the
// backward pass.
struct BlockTrace {
    Tensor x;
    Tensor xhat;
    std::vector<double> invstd;
    Tensor y;
};

struct UNetTrace {
    BlockTrace stem;
    std::vector<BlockTrace> down; // [levels]
    std::vector<BlockTrace> enc;  // [levels]
    std::vector<BlockTrace> dec;  // [levels], dec[l-1] consumes level-l upsample
    Tensor features;              // (B, base_channels, Z, Y, X)
};

struct DomainTrace {
    std::vector<BlockTrace> blocks; // 3 strided conv blocks
    Tensor pooled;                  // (B, 8*base_channels)
};

/// Two-headed 3D U-Net: `levels` strided-conv downsampling stages, mirrored
/// nearest-neighbor upsampling with skip concatenation, instance norm + ReLU
/// after every trunk convolution, no dropout anywhere. The segmentor is a
/// single 1x1x1 convolution on the full-resolution features; the domain
/// predictor is 3 strided conv blocks + global average pooling + linear.
class UNet3D {
  public:
    UNet3D(const ArchConfig& cfg, std::uint64_t seed);

    const ArchConfig& config() const { return cfg_; }
    std::vector<ParamTensor>& params() { return params_; }
    const std::vector<ParamTensor>& params() const { return params_; }
    int param_index(const std::string& name) const;

    /// Structural op listing ("conv3", "instance_norm", "relu", ...).
    std::vector<std::string> op_kinds() const;
    int downsample_stages() const;
    int upsample_stages() const;

    GradBuffer make_grad_buffer(std::array<bool, 3> want = {true, true, true}) const;

    /// images (B, in_channels, Z, Y, X) -> features (B, base_channels, Z, Y, X).
    const Tensor& forward_features(const Tensor& images, UNetTrace& trace) const;
    /// features -> seg logits (B, 1, Z, Y, X).
    Tensor forward_segment(const Tensor& features) const;
    /// features -> domain logits (B, n_domains).
    Tensor forward_domain(const Tensor& features, DomainTrace& trace) const;

    /// Backward of a loss on seg logits. Reaches groups {repr, seg}; the
    /// trunk pass is skipped when repr gradients are not wanted.
    void backward_segment(const Tensor& dlogits, const UNetTrace& trace,
                          GradBuffer& grads) const;
    /// Backward of a loss on domain logits. Reaches groups {repr, dp}.
    void backward_domain(const Tensor& dlogits, const UNetTrace& trace,
                         const DomainTrace& dtrace, GradBuffer& grads) const;

    void save_checkpoint(const std::string& path) const;
    static UNet3D load_checkpoint(const std::string& path);

  private:
    struct ConvBlock {
        std::string name;
        int w = -1, b = -1, gamma = -1, beta = -1; // param indices
        int in_c = 0, out_c = 0, kernel = 3, stride = 1, pad = 1;
        bool norm_relu = true;
        ParamGroup group = ParamGroup::repr;
    };

    ConvBlock make_block(const std::string& name, ParamGroup group, int in_c, int out_c,
                         int kernel, int stride, bool norm_relu, std::uint64_t seed);
    Tensor block_forward(const ConvBlock& blk, const Tensor& x, BlockTrace& trace) const;
    /// Returns d(loss)/d(block input); accumulates parameter grads when the
    /// block's group is wanted. need_dx=false skips the data gradient.
    Tensor block_backward(const ConvBlock& blk, const Tensor& dy, const BlockTrace& trace,
                          GradBuffer& grads, bool need_dx = true) const;
    Tensor backward_trunk(const Tensor& dfeatures, const UNetTrace& trace,
                          GradBuffer& grads) const;

    ArchConfig cfg_;
    std::vector<ParamTensor> params_;
    ConvBlock stem_;
    std::vector<ConvBlock> down_, enc_, dec_;
    ConvBlock seg_out_;
    std::vector<ConvBlock> dp_blocks_;
    int dp_fc_w_ = -1, dp_fc_b_ = -1;
};

// Low-level ops, exposed for targeted tests.
Tensor conv3d_forward(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                      int pad);
void conv3d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, int stride,
                     int pad, Tensor* dx, Tensor* dw, Tensor* db);
Tensor upsample_nearest2(const Tensor& x);
Tensor upsample_nearest2_backward(const Tensor& dy);

} // namespace oodseg
