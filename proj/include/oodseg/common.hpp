#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace oodseg {

/// Spatial extent of a volume, in voxels. (W, H, D) = (X, Y, Z); voxel data
/// is stored x-fastest, i.e. linear index = x + W * (y + H * z).
struct Shape3 {
    std::int64_t w = 0;
    std::int64_t h = 0;
    std::int64_t d = 0;

    std::int64_t numel() const { return w * h * d; }
    bool operator==(const Shape3&) const = default;
};

inline std::string to_string(const Shape3& s) {
    return "(" + std::to_string(s.w) + "," + std::to_string(s.h) + "," +
           std::to_string(s.d) + ")";
}

/// Failure classes. Values 2-4 double as process exit codes of the CLI.
enum class Status : int {
    ok = 0,
    invalid_config = 2,
    divergence = 3,
    io_error = 4,
    invalid_argument = 5,
    internal = 6,
};

class Error : public std::runtime_error {
  public:
    Error(Status status, const std::string& what)
        : std::runtime_error(what), status_(status) {}

    Status status() const { return status_; }

  private:
    Status status_;
};

[[noreturn]] inline void fail(Status status, const std::string& what) {
    throw Error(status, what);
}

} // namespace oodseg
