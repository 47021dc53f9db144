#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hoi {

// Error hierarchy. Everything thrown by the library derives from hoi::Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class InvalidImageError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Slice sums of images read from files are checked at this tolerance.
inline constexpr double kExternalTolerance = 1e-6;
// Images produced in-process must satisfy this tighter bound.
inline constexpr double kInternalTolerance = 1e-9;

// Channel 0 is "present", channel 1 is "absent".
inline constexpr std::size_t kPresent = 0;
inline constexpr std::size_t kAbsent = 1;

struct HoiShape {
  std::size_t h = 0;  // object categories
  std::size_t w = 0;  // interaction categories

  std::size_t size() const noexcept { return h * w * 2; }
  std::size_t slice_size() const noexcept { return h * 2; }
  std::size_t index(std::size_t row, std::size_t col, std::size_t channel) const noexcept {
    return (row * w + col) * 2 + channel;
  }
  void check() const;

  friend bool operator==(const HoiShape&, const HoiShape&) = default;
};

/// Categorical distribution over the H object classes.
class ObjectDist {
 public:
  explicit ObjectDist(std::vector<double> probs, double tolerance = kInternalTolerance);

  static ObjectDist one_hot(std::size_t size, std::size_t index);
  static ObjectDist uniform(std::size_t size);

  std::span<const double> probs() const noexcept { return probs_; }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::size_t size() const noexcept { return probs_.size(); }

 private:
  std::vector<double> probs_;
};

/// W presence/absence distributions, one per interaction category.
class InteractionMatrix {
 public:
  using Row = std::array<double, 2>;

  explicit InteractionMatrix(std::vector<Row> rows, double tolerance = kInternalTolerance);

  static InteractionMatrix all_half(std::size_t w);
  // Rows are (1, 0) for listed interactions and (0, 1) otherwise.
  static InteractionMatrix from_present(std::size_t w, std::span<const int> present);

  std::span<const Row> rows() const noexcept { return rows_; }
  const Row& operator[](std::size_t i) const { return rows_[i]; }
  std::size_t size() const noexcept { return rows_.size(); }

 private:
  std::vector<Row> rows_;
};

/// H x W x 2 array whose vertical slices [:, w, :] are each a probability
/// distribution. Storage is row-major over (h, w, c).
class HoiImage {
 public:
  static HoiImage from_data(HoiShape shape, std::vector<double> data,
                            double tolerance = kExternalTolerance);

  const HoiShape& shape() const noexcept { return shape_; }
  std::span<const double> data() const noexcept { return data_; }
  double at(std::size_t row, std::size_t col, std::size_t channel) const {
    return data_[shape_.index(row, col, channel)];
  }

  // Vertical slice w flattened as (h, c) pairs, length 2H.
  std::vector<double> slice(std::size_t col) const;

 private:
  HoiImage(HoiShape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {}

  HoiShape shape_;
  std::vector<double> data_;
};

HoiImage compose(const ObjectDist& v, const InteractionMatrix& m);

std::pair<ObjectDist, InteractionMatrix> decompose(const HoiImage& img);

struct ValidityReport {
  bool pass = false;
  double max_slice_deviation = 0.0;
  double min_entry = 0.0;
  // First offending pixel/slice, set when pass is false.
  std::optional<std::array<std::size_t, 3>> location;
  std::string message;
};

ValidityReport validate(HoiShape shape, std::span<const double> data,
                        double tolerance = kExternalTolerance);
ValidityReport validate(const HoiImage& img, double tolerance = kExternalTolerance);

// Per-slice softmax over the 2H entries of every vertical slice.
HoiImage project_to_valid(HoiShape shape, std::span<const double> raw);

// Assemble an image from per-slice vectors (each of length 2H).
HoiImage image_from_slices(HoiShape shape, const std::vector<std::vector<double>>& slices,
                           double tolerance = kInternalTolerance);

}  // namespace hoi
