#include "hoi/core_types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace hoi {

namespace {

void check_simplex(std::span<const double> p, double tolerance, const char* what) {
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!std::isfinite(p[i])) {
      throw NonFiniteError(std::string(what) + ": non-finite entry at " + std::to_string(i));
    }
    if (p[i] < 0.0) {
      throw InvalidImageError(std::string(what) + ": negative entry at " + std::to_string(i));
    }
    sum += p[i];
  }
  if (std::abs(sum - 1.0) > tolerance) {
    std::ostringstream os;
    os << what << ": entries sum to " << sum;
    throw InvalidImageError(os.str());
  }
}

}  // namespace

void HoiShape::check() const {
  if (h == 0 || w == 0) {
    throw DimensionError("HOI shape must have h >= 1 and w >= 1 (got " + std::to_string(h) +
                         "x" + std::to_string(w) + ")");
  }
}

ObjectDist::ObjectDist(std::vector<double> probs, double tolerance) : probs_(std::move(probs)) {
  if (probs_.empty()) throw DimensionError("object distribution must be non-empty");
  check_simplex(probs_, tolerance, "object distribution");
}

ObjectDist ObjectDist::one_hot(std::size_t size, std::size_t index) {
  if (index >= size) throw RangeError("one-hot index out of range");
  std::vector<double> p(size, 0.0);
  p[index] = 1.0;
  return ObjectDist(std::move(p));
}

ObjectDist ObjectDist::uniform(std::size_t size) {
  if (size == 0) throw DimensionError("object distribution must be non-empty");
  return ObjectDist(std::vector<double>(size, 1.0 / static_cast<double>(size)));
}

InteractionMatrix::InteractionMatrix(std::vector<Row> rows, double tolerance)
    : rows_(std::move(rows)) {
  if (rows_.empty()) throw DimensionError("interaction matrix must be non-empty");
  for (const Row& r : rows_) check_simplex(r, tolerance, "interaction row");
}

InteractionMatrix InteractionMatrix::all_half(std::size_t w) {
  return InteractionMatrix(std::vector<Row>(w, Row{0.5, 0.5}));
}

InteractionMatrix InteractionMatrix::from_present(std::size_t w, std::span<const int> present) {
  std::vector<Row> rows(w, Row{0.0, 1.0});
  for (int idx : present) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= w) {
      throw RangeError("interaction index out of range: " + std::to_string(idx));
    }
    rows[static_cast<std::size_t>(idx)] = Row{1.0, 0.0};
  }
  return InteractionMatrix(std::move(rows));
}

HoiImage HoiImage::from_data(HoiShape shape, std::vector<double> data, double tolerance) {
  shape.check();
  if (data.size() != shape.size()) {
    throw DimensionError("image data has " + std::to_string(data.size()) + " entries, expected " +
                         std::to_string(shape.size()));
  }
  ValidityReport report = validate(shape, data, tolerance);
  if (!report.pass) throw InvalidImageError(report.message);
  return HoiImage(shape, std::move(data));
}

std::vector<double> HoiImage::slice(std::size_t col) const {
  std::vector<double> out(shape_.slice_size());
  for (std::size_t row = 0; row < shape_.h; ++row) {
    out[row * 2 + kPresent] = at(row, col, kPresent);
    out[row * 2 + kAbsent] = at(row, col, kAbsent);
  }
  return out;
}

HoiImage compose(const ObjectDist& v, const InteractionMatrix& m) {
  const HoiShape shape{v.size(), m.size()};
  shape.check();
  std::vector<double> data(shape.size());
  for (std::size_t h = 0; h < shape.h; ++h) {
    for (std::size_t w = 0; w < shape.w; ++w) {
      data[shape.index(h, w, kPresent)] = v[h] * m[w][kPresent];
      data[shape.index(h, w, kAbsent)] = v[h] * m[w][kAbsent];
    }
  }
  return HoiImage::from_data(shape, std::move(data), kInternalTolerance);
}

std::pair<ObjectDist, InteractionMatrix> decompose(const HoiImage& img) {
  const HoiShape& shape = img.shape();
  ValidityReport report = validate(img, kExternalTolerance);
  if (!report.pass) throw InvalidImageError(report.message);

  std::vector<double> v(shape.h, 0.0);
  std::vector<InteractionMatrix::Row> m(shape.w, InteractionMatrix::Row{0.0, 0.0});
  for (std::size_t h = 0; h < shape.h; ++h) {
    double row_mass = 0.0;
    for (std::size_t w = 0; w < shape.w; ++w) {
      for (std::size_t c = 0; c < 2; ++c) {
        const double x = img.at(h, w, c);
        row_mass += x;
        m[w][c] += x;
      }
    }
    v[h] = row_mass / static_cast<double>(shape.w);
  }
  return {ObjectDist(std::move(v), kExternalTolerance),
          InteractionMatrix(std::move(m), kExternalTolerance)};
}

ValidityReport validate(HoiShape shape, std::span<const double> data, double tolerance) {
  ValidityReport report;
  if (shape.h == 0 || shape.w == 0 || data.size() != shape.size()) {
    report.message = "shape mismatch";
    return report;
  }
  report.min_entry = std::numeric_limits<double>::infinity();
  bool ok = true;
  for (std::size_t w = 0; w < shape.w; ++w) {
    double sum = 0.0;
    for (std::size_t h = 0; h < shape.h; ++h) {
      for (std::size_t c = 0; c < 2; ++c) {
        const double x = data[shape.index(h, w, c)];
        if (!std::isfinite(x) || x < 0.0) {
          if (ok) {
            report.location = std::array<std::size_t, 3>{h, w, c};
            std::ostringstream os;
            os << "invalid entry " << x << " at (" << h << ", " << w << ", " << c << ")";
            report.message = os.str();
          }
          ok = false;
        }
        if (std::isfinite(x)) report.min_entry = std::min(report.min_entry, x);
        sum += x;
      }
    }
    const double dev = std::abs(sum - 1.0);
    if (!(dev <= tolerance)) {
      if (ok) {
        report.location = std::array<std::size_t, 3>{0, w, 0};
        std::ostringstream os;
        os << "vertical slice " << w << " sums to " << sum;
        report.message = os.str();
      }
      ok = false;
    }
    if (std::isnan(dev)) {
      report.max_slice_deviation = dev;
    } else if (!std::isnan(report.max_slice_deviation)) {
      report.max_slice_deviation = std::max(report.max_slice_deviation, dev);
    }
  }
  report.pass = ok;
  if (ok) report.message = "ok";
  return report;
}

ValidityReport validate(const HoiImage& img, double tolerance) {
  return validate(img.shape(), img.data(), tolerance);
}

HoiImage project_to_valid(HoiShape shape, std::span<const double> raw) {
  shape.check();
  if (raw.size() != shape.size()) throw DimensionError("raw array size mismatch");
  std::vector<double> out(raw.size());
  for (std::size_t w = 0; w < shape.w; ++w) {
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t h = 0; h < shape.h; ++h) {
      for (std::size_t c = 0; c < 2; ++c) {
        const double x = raw[shape.index(h, w, c)];
        if (!std::isfinite(x)) throw NonFiniteError("project_to_valid: non-finite input");
        hi = std::max(hi, x);
      }
    }
    double z = 0.0;
    for (std::size_t h = 0; h < shape.h; ++h) {
      for (std::size_t c = 0; c < 2; ++c) {
        const std::size_t i = shape.index(h, w, c);
        out[i] = std::exp(raw[i] - hi);
        z += out[i];
      }
    }
    for (std::size_t h = 0; h < shape.h; ++h) {
      for (std::size_t c = 0; c < 2; ++c) out[shape.index(h, w, c)] /= z;
    }
  }
  return HoiImage::from_data(shape, std::move(out), kInternalTolerance);
}

HoiImage image_from_slices(HoiShape shape, const std::vector<std::vector<double>>& slices,
                           double tolerance) {
  shape.check();
  if (slices.size() != shape.w) throw DimensionError("slice count mismatch");
  std::vector<double> data(shape.size());
  for (std::size_t w = 0; w < shape.w; ++w) {
    if (slices[w].size() != shape.slice_size()) throw DimensionError("slice length mismatch");
    for (std::size_t h = 0; h < shape.h; ++h) {
      data[shape.index(h, w, kPresent)] = slices[w][h * 2 + kPresent];
      data[shape.index(h, w, kAbsent)] = slices[w][h * 2 + kAbsent];
    }
  }
  return HoiImage::from_data(shape, std::move(data), tolerance);
}

}  // namespace hoi
