#include "hoi/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

namespace hoi {

namespace {

using ConstMap = Eigen::Map<const Mat>;
using GradMap = Eigen::Map<Mat>;
using RowVec = Eigen::RowVectorXd;

constexpr double kNormEps = 1e-6;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
double silu(double z) { return z * sigmoid(z); }
double silu_grad(double z) {
  const double s = sigmoid(z);
  return s * (1.0 + z * (1.0 - s));
}

using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

// Eigen peels unaligned heads based on the buffer address, which changes the
// summation order. Weights and gradient accumulators therefore live in buffers
// with a fixed alignment so results do not depend on where the caller's
// vectors happen to sit in memory.
class Weights {
 public:
  explicit Weights(const DenoiserParams& p)
      : layout_(p.layout()), values_(p.values().begin(), p.values().end()) {}

  ConstMap operator()(const std::string& name) const {
    const TensorSlot& slot = layout_.at(name);
    return ConstMap(values_.data() + slot.offset, static_cast<Eigen::Index>(slot.rows),
                    static_cast<Eigen::Index>(slot.cols));
  }

 private:
  const ParamLayout& layout_;
  AlignedBuffer values_;
};

ConstMap view(const Weights& w, const std::string& name) { return w(name); }

GradMap grad_view(const ParamLayout& layout, std::span<double> grads, const std::string& name) {
  const TensorSlot& slot = layout.at(name);
  return GradMap(grads.data() + slot.offset, static_cast<Eigen::Index>(slot.rows),
                 static_cast<Eigen::Index>(slot.cols));
}

// y = x W^T + b
Mat linear(const Mat& x, const ConstMap& w, const ConstMap& b) {
  Mat y(x.rows(), w.rows());
  y.noalias() = x * w.transpose();
  y.rowwise() += b.row(0);
  return y;
}

// Accumulates weight/bias gradients and returns dx.
Mat linear_backward(const Mat& x, const ConstMap& w, const Mat& dy, GradMap dw, GradMap db) {
  dw.noalias() += dy.transpose() * x;
  db.row(0) += dy.colwise().sum();
  Mat dx(dy.rows(), w.cols());
  dx.noalias() = dy * w;
  return dx;
}

void layer_norm(const Mat& x, Mat& n, Eigen::VectorXd& rstd) {
  const Eigen::Index rows = x.rows();
  const double d = static_cast<double>(x.cols());
  n.resize(rows, x.cols());
  rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).sum() / d;
    const RowVec centered = x.row(r).array() - mean;
    const double var = centered.squaredNorm() / d;
    rstd(r) = 1.0 / std::sqrt(var + kNormEps);
    n.row(r) = centered * rstd(r);
  }
}

Mat layer_norm_backward(const Mat& dn, const Mat& n, const Eigen::VectorXd& rstd) {
  const double d = static_cast<double>(n.cols());
  Mat dx(dn.rows(), dn.cols());
  for (Eigen::Index r = 0; r < dn.rows(); ++r) {
    const double mean_dn = dn.row(r).sum() / d;
    const double mean_dn_n = dn.row(r).dot(n.row(r)) / d;
    dx.row(r) = rstd(r) * (dn.row(r).array() - mean_dn - n.row(r).array() * mean_dn_n).matrix();
  }
  return dx;
}

// u = n * (1 + scale_i) + shift_i per sample i, where rows i*L..i*L+L-1 belong to i.
Mat modulate(const Mat& n, const Mat& mod, std::size_t shift_col, std::size_t scale_col,
             std::size_t L, std::size_t D) {
  Mat u(n.rows(), n.cols());
  const auto Li = static_cast<Eigen::Index>(L);
  const auto Di = static_cast<Eigen::Index>(D);
  for (Eigen::Index i = 0; i < mod.rows(); ++i) {
    const RowVec scale = mod.block(i, static_cast<Eigen::Index>(scale_col), 1, Di).array() + 1.0;
    const RowVec shift = mod.block(i, static_cast<Eigen::Index>(shift_col), 1, Di);
    auto dst = u.block(i * Li, 0, Li, Di);
    dst.array() = n.block(i * Li, 0, Li, Di).array().rowwise() * scale.array();
    dst.rowwise() += shift;
  }
  return u;
}

// Backward of modulate: writes dshift/dscale into dmod and returns dn.
Mat modulate_backward(const Mat& du, const Mat& n, const Mat& mod, Mat& dmod,
                      std::size_t shift_col, std::size_t scale_col, std::size_t L, std::size_t D) {
  Mat dn(du.rows(), du.cols());
  const auto Li = static_cast<Eigen::Index>(L);
  const auto Di = static_cast<Eigen::Index>(D);
  for (Eigen::Index i = 0; i < mod.rows(); ++i) {
    const RowVec scale = mod.block(i, static_cast<Eigen::Index>(scale_col), 1, Di).array() + 1.0;
    const auto du_i = du.block(i * Li, 0, Li, Di);
    dn.block(i * Li, 0, Li, Di).array() = du_i.array().rowwise() * scale.array();
    dmod.block(i, static_cast<Eigen::Index>(shift_col), 1, Di) += du_i.colwise().sum();
    dmod.block(i, static_cast<Eigen::Index>(scale_col), 1, Di) +=
        du_i.cwiseProduct(n.block(i * Li, 0, Li, Di)).colwise().sum();
  }
  return dn;
}

// x += gate_i * branch
void gated_add(Mat& x, const Mat& branch, const Mat& mod, std::size_t gate_col, std::size_t L,
               std::size_t D) {
  const auto Li = static_cast<Eigen::Index>(L);
  const auto Di = static_cast<Eigen::Index>(D);
  for (Eigen::Index i = 0; i < mod.rows(); ++i) {
    const RowVec gate = mod.block(i, static_cast<Eigen::Index>(gate_col), 1, Di);
    x.block(i * Li, 0, Li, Di).array() +=
        branch.block(i * Li, 0, Li, Di).array().rowwise() * gate.array();
  }
}

// Backward of gated_add for the branch: returns d(branch), accumulates dgate.
Mat gated_add_backward(const Mat& dx, const Mat& branch, const Mat& mod, Mat& dmod,
                       std::size_t gate_col, std::size_t L, std::size_t D) {
  Mat dbranch(dx.rows(), dx.cols());
  const auto Li = static_cast<Eigen::Index>(L);
  const auto Di = static_cast<Eigen::Index>(D);
  for (Eigen::Index i = 0; i < mod.rows(); ++i) {
    const RowVec gate = mod.block(i, static_cast<Eigen::Index>(gate_col), 1, Di);
    const auto dx_i = dx.block(i * Li, 0, Li, Di);
    dbranch.block(i * Li, 0, Li, Di).array() = dx_i.array().rowwise() * gate.array();
    dmod.block(i, static_cast<Eigen::Index>(gate_col), 1, Di) +=
        dx_i.cwiseProduct(branch.block(i * Li, 0, Li, Di)).colwise().sum();
  }
  return dbranch;
}

struct Dims {
  std::size_t n, L, D, heads, dh;
};

void attention_forward(const Mat& qkv, const Dims& d, Mat& probs, Mat& attn) {
  const auto L = static_cast<Eigen::Index>(d.L);
  const auto D = static_cast<Eigen::Index>(d.D);
  const auto dh = static_cast<Eigen::Index>(d.dh);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.dh));
  probs.resize(static_cast<Eigen::Index>(d.n * d.heads) * L, L);
  attn.resize(static_cast<Eigen::Index>(d.n) * L, D);
  Mat scores(L, L);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(d.n); ++i) {
    for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(d.heads); ++h) {
      const auto q = qkv.block(i * L, h * dh, L, dh);
      const auto k = qkv.block(i * L, D + h * dh, L, dh);
      const auto v = qkv.block(i * L, 2 * D + h * dh, L, dh);
      scores.noalias() = q * k.transpose();
      scores *= scale;
      for (Eigen::Index r = 0; r < L; ++r) {
        const double hi = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - hi).exp();
        scores.row(r) /= scores.row(r).sum();
      }
      const Eigen::Index base = (i * static_cast<Eigen::Index>(d.heads) + h) * L;
      probs.block(base, 0, L, L) = scores;
      attn.block(i * L, h * dh, L, dh).noalias() = scores * v;
    }
  }
}

Mat attention_backward(const Mat& qkv, const Mat& probs, const Mat& dattn, const Dims& d) {
  const auto L = static_cast<Eigen::Index>(d.L);
  const auto D = static_cast<Eigen::Index>(d.D);
  const auto dh = static_cast<Eigen::Index>(d.dh);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.dh));
  Mat dqkv = Mat::Zero(qkv.rows(), qkv.cols());
  Mat dp(L, L), ds(L, L);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(d.n); ++i) {
    for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(d.heads); ++h) {
      const auto q = qkv.block(i * L, h * dh, L, dh);
      const auto k = qkv.block(i * L, D + h * dh, L, dh);
      const auto v = qkv.block(i * L, 2 * D + h * dh, L, dh);
      const Eigen::Index base = (i * static_cast<Eigen::Index>(d.heads) + h) * L;
      const auto p = probs.block(base, 0, L, L);
      const auto dout = dattn.block(i * L, h * dh, L, dh);
      dp.noalias() = dout * v.transpose();
      dqkv.block(i * L, 2 * D + h * dh, L, dh).noalias() = p.transpose() * dout;
      for (Eigen::Index r = 0; r < L; ++r) {
        const double dot = dp.row(r).dot(p.row(r));
        ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
      }
      ds *= scale;
      dqkv.block(i * L, h * dh, L, dh).noalias() = ds * k;
      dqkv.block(i * L, D + h * dh, L, dh).noalias() = ds.transpose() * q;
    }
  }
  return dqkv;
}

std::vector<double> inverse_cover(const DenoiserConfig& cfg, const std::vector<TokenGroup>& groups) {
  std::vector<double> cover(cfg.shape().size(), 0.0);
  for (const TokenGroup& g : groups) {
    for (int idx : g.gather) {
      if (idx >= 0) cover[static_cast<std::size_t>(idx)] += 1.0;
    }
  }
  for (double& c : cover) {
    if (c <= 0.0) throw DimensionError("patch layout leaves a pixel uncovered");
    c = 1.0 / c;
  }
  return cover;
}

std::string block_name(std::size_t b, const char* leaf) {
  return "block." + std::to_string(b) + "." + leaf;
}

}  // namespace

std::string to_string(PatchMode mode) {
  switch (mode) {
    case PatchMode::slice: return "slice";
    case PatchMode::local: return "local";
    case PatchMode::horizontal: return "horizontal";
    case PatchMode::vertical: return "vertical";
  }
  return "slice";
}

PatchMode parse_patch_mode(std::string_view name) {
  if (name == "slice") return PatchMode::slice;
  if (name == "local") return PatchMode::local;
  if (name == "horizontal") return PatchMode::horizontal;
  if (name == "vertical") return PatchMode::vertical;
  throw ConfigError("unknown patch mode: " + std::string(name));
}

void DenoiserConfig::check() const {
  shape().check();
  if (d_model == 0 || blocks == 0 || heads == 0 || d_appearance == 0 || ffn_mult == 0 ||
      steps == 0) {
    throw ConfigError("denoiser dimensions must be positive");
  }
  if (d_model % heads != 0) throw ConfigError("model width must be divisible by head count");
  if (d_step == 0 || d_step % 2 != 0) throw ConfigError("step embedding width must be even");
  if (patch_mode == PatchMode::local && (local_patch_h == 0 || local_patch_w == 0)) {
    throw ConfigError("local patch size must be positive");
  }
}

std::vector<TokenGroup> token_groups(const DenoiserConfig& cfg) {
  const HoiShape s = cfg.shape();
  std::vector<TokenGroup> groups;
  auto horizontal = [&] {
    TokenGroup g{"horizontal", s.h, s.w * 2, {}};
    for (std::size_t h = 0; h < s.h; ++h)
      for (std::size_t w = 0; w < s.w; ++w)
        for (std::size_t c = 0; c < 2; ++c) g.gather.push_back(static_cast<int>(s.index(h, w, c)));
    return g;
  };
  auto vertical = [&] {
    TokenGroup g{"vertical", s.w, s.h * 2, {}};
    for (std::size_t w = 0; w < s.w; ++w)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t c = 0; c < 2; ++c) g.gather.push_back(static_cast<int>(s.index(h, w, c)));
    return g;
  };
  switch (cfg.patch_mode) {
    case PatchMode::slice:
      groups.push_back(horizontal());
      groups.push_back(vertical());
      break;
    case PatchMode::horizontal:
      groups.push_back(horizontal());
      break;
    case PatchMode::vertical:
      groups.push_back(vertical());
      break;
    case PatchMode::local: {
      const std::size_t ph = cfg.local_patch_h;
      const std::size_t pw = cfg.local_patch_w;
      const std::size_t rows = (s.h + ph - 1) / ph;
      const std::size_t cols = (s.w + pw - 1) / pw;
      TokenGroup g{"local", rows * cols, ph * pw * 2, {}};
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t q = 0; q < cols; ++q)
          for (std::size_t dh = 0; dh < ph; ++dh)
            for (std::size_t dw = 0; dw < pw; ++dw)
              for (std::size_t c = 0; c < 2; ++c) {
                const std::size_t h = r * ph + dh;
                const std::size_t w = q * pw + dw;
                g.gather.push_back(h < s.h && w < s.w ? static_cast<int>(s.index(h, w, c)) : -1);
              }
      groups.push_back(std::move(g));
      break;
    }
  }
  return groups;
}

std::size_t token_count(const DenoiserConfig& cfg) {
  std::size_t n = 0;
  for (const TokenGroup& g : token_groups(cfg)) n += g.tokens;
  return n;
}

ParamLayout::ParamLayout(const DenoiserConfig& cfg) {
  cfg.check();
  const std::size_t D = cfg.d_model;
  const std::size_t F = cfg.d_model * cfg.ffn_mult;
  const auto groups = token_groups(cfg);
  for (const TokenGroup& g : groups) {
    add("embed." + g.name + ".w1", D, g.patch_len);
    add("embed." + g.name + ".b1", 1, D);
    add("embed." + g.name + ".w2", D, D);
    add("embed." + g.name + ".b2", 1, D);
  }
  add("pos", token_count(cfg), D);
  add("cond.wa", D, cfg.d_appearance);
  add("cond.ba", 1, D);
  add("cond.ws", D, cfg.d_step);
  add("cond.bs", 1, D);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    add(block_name(b, "mod.w"), 6 * D, D);
    add(block_name(b, "mod.b"), 1, 6 * D);
    add(block_name(b, "qkv.w"), 3 * D, D);
    add(block_name(b, "qkv.b"), 1, 3 * D);
    add(block_name(b, "proj.w"), D, D);
    add(block_name(b, "proj.b"), 1, D);
    add(block_name(b, "ffn1.w"), F, D);
    add(block_name(b, "ffn1.b"), 1, F);
    add(block_name(b, "ffn2.w"), D, F);
    add(block_name(b, "ffn2.b"), 1, D);
  }
  for (const TokenGroup& g : groups) {
    add("head." + g.name + ".w", g.patch_len, D);
    add("head." + g.name + ".b", 1, g.patch_len);
  }
}

void ParamLayout::add(std::string name, std::size_t rows, std::size_t cols) {
  tensors_.push_back({std::move(name), total_, rows, cols});
  total_ += rows * cols;
}

const TensorSlot& ParamLayout::at(std::string_view name) const {
  for (const TensorSlot& t : tensors_) {
    if (t.name == name) return t;
  }
  throw DimensionError("no parameter tensor named " + std::string(name));
}

std::size_t parameter_count(const DenoiserConfig& cfg) { return ParamLayout(cfg).total(); }

DenoiserParams::DenoiserParams(DenoiserConfig cfg)
    : cfg_(cfg), layout_(cfg_), values_(layout_.total(), 0.0), grads_(layout_.total(), 0.0) {}

DenoiserParams DenoiserParams::initialized(DenoiserConfig cfg, Rng& rng) {
  DenoiserParams p(cfg);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (const TensorSlot& t : p.layout_.tensors()) {
    double* data = p.values_.data() + t.offset;
    const bool is_bias = t.rows == 1;
    if (t.name == "pos") {
      for (std::size_t i = 0; i < t.size(); ++i) data[i] = normal(rng);
    } else if (!is_bias) {
      // Xavier-uniform; modulation starts small so blocks begin near identity.
      double limit = std::sqrt(6.0 / static_cast<double>(t.rows + t.cols));
      if (t.name.ends_with("mod.w")) limit *= 0.1;
      for (std::size_t i = 0; i < t.size(); ++i) data[i] = limit * unit(rng);
    }
  }
  return p;
}

void DenoiserParams::zero_grad() { std::fill(grads_.begin(), grads_.end(), 0.0); }

Eigen::Map<const Mat> DenoiserParams::tensor(std::string_view name) const {
  const TensorSlot& t = layout_.at(name);
  return Eigen::Map<const Mat>(values_.data() + t.offset, static_cast<Eigen::Index>(t.rows),
                               static_cast<Eigen::Index>(t.cols));
}

Eigen::Map<Mat> DenoiserParams::tensor(std::string_view name) {
  const TensorSlot& t = layout_.at(name);
  return Eigen::Map<Mat>(values_.data() + t.offset, static_cast<Eigen::Index>(t.rows),
                         static_cast<Eigen::Index>(t.cols));
}

bool DenoiserParams::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::vector<double> step_embedding(int k, std::size_t d_step) {
  const std::size_t half = d_step / 2;
  std::vector<double> out(d_step, 0.0);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(static_cast<double>(k) * freq);
    out[half + i] = std::cos(static_cast<double>(k) * freq);
  }
  return out;
}

Conditioning Conditioning::make(std::span<const double> appearance, int k, std::size_t d_step) {
  return {std::vector<double>(appearance.begin(), appearance.end()), hoi::step_embedding(k, d_step)};
}

PatchSet slice_patchify(const HoiImage& img) {
  const HoiShape& s = img.shape();
  PatchSet ps;
  ps.shape = s;
  ps.horizontal.assign(s.h, std::vector<double>(s.w * 2));
  ps.vertical.assign(s.w, std::vector<double>(s.h * 2));
  for (std::size_t h = 0; h < s.h; ++h) {
    for (std::size_t w = 0; w < s.w; ++w) {
      for (std::size_t c = 0; c < 2; ++c) {
        const double x = img.at(h, w, c);
        ps.horizontal[h][w * 2 + c] = x;
        ps.vertical[w][h * 2 + c] = x;
      }
    }
  }
  return ps;
}

std::vector<double> slice_depatchify(const PatchSet& patches) {
  const HoiShape& s = patches.shape;
  std::vector<double> out(s.size(), 0.0);
  for (std::size_t h = 0; h < s.h; ++h) {
    for (std::size_t w = 0; w < s.w; ++w) {
      for (std::size_t c = 0; c < 2; ++c) {
        out[s.index(h, w, c)] = 0.5 * (patches.horizontal[h][w * 2 + c] + patches.vertical[w][h * 2 + c]);
      }
    }
  }
  return out;
}

Mat patches_to_tokens(const PatchSet& patches, const DenoiserParams& params) {
  const DenoiserConfig& cfg = params.config();
  if (cfg.patch_mode != PatchMode::slice) throw DimensionError("slice tokens need slice mode");
  if (!(patches.shape == cfg.shape()) || patches.horizontal.size() != cfg.h ||
      patches.vertical.size() != cfg.w) {
    throw DimensionError("patch set does not match the model shape");
  }
  const Weights weights(params);
  const auto pos = view(weights, "pos");
  Mat tokens(static_cast<Eigen::Index>(cfg.h + cfg.w), static_cast<Eigen::Index>(cfg.d_model));
  Eigen::Index row = 0;
  auto embed = [&](const std::vector<std::vector<double>>& group, const std::string& name,
                   std::size_t len) {
    Mat in(static_cast<Eigen::Index>(group.size()), static_cast<Eigen::Index>(len));
    for (std::size_t t = 0; t < group.size(); ++t) {
      if (group[t].size() != len) throw DimensionError("patch length mismatch");
      for (std::size_t e = 0; e < len; ++e) in(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(e)) = group[t][e];
    }
    Mat hidden = linear(in, view(weights, "embed." + name + ".w1"), view(weights, "embed." + name + ".b1"));
    hidden = hidden.cwiseMax(0.0);
    const Mat out = linear(hidden, view(weights, "embed." + name + ".w2"), view(weights, "embed." + name + ".b2"));
    tokens.block(row, 0, out.rows(), out.cols()) = out + pos.block(row, 0, out.rows(), out.cols());
    row += out.rows();
  };
  embed(patches.horizontal, "horizontal", cfg.w * 2);
  embed(patches.vertical, "vertical", cfg.h * 2);
  return tokens;
}

DenoiseBatch::DenoiseBatch(std::size_t n, const DenoiserConfig& cfg)
    : images(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cfg.shape().size())),
      appearance(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cfg.d_appearance)),
      step_feat(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cfg.d_step)) {}

void DenoiseBatch::set(std::size_t row, std::span<const double> image,
                       std::span<const double> appearance_row, int k) {
  const auto r = static_cast<Eigen::Index>(row);
  if (image.size() != static_cast<std::size_t>(images.cols()) ||
      appearance_row.size() != static_cast<std::size_t>(appearance.cols())) {
    throw DimensionError("batch row has the wrong width");
  }
  for (std::size_t j = 0; j < image.size(); ++j) images(r, static_cast<Eigen::Index>(j)) = image[j];
  for (std::size_t j = 0; j < appearance_row.size(); ++j) {
    appearance(r, static_cast<Eigen::Index>(j)) = appearance_row[j];
  }
  const std::vector<double> emb = step_embedding(k, static_cast<std::size_t>(step_feat.cols()));
  for (std::size_t j = 0; j < emb.size(); ++j) step_feat(r, static_cast<Eigen::Index>(j)) = emb[j];
}

Mat denoise_batch(const DenoiserParams& params, const DenoiseBatch& batch, ForwardCache* cache) {
  const DenoiserConfig& cfg = params.config();
  const HoiShape shape = cfg.shape();
  const std::size_t N = batch.size();
  if (static_cast<std::size_t>(batch.images.cols()) != shape.size() ||
      static_cast<std::size_t>(batch.appearance.cols()) != cfg.d_appearance ||
      static_cast<std::size_t>(batch.step_feat.cols()) != cfg.d_step ||
      static_cast<std::size_t>(batch.appearance.rows()) != N ||
      static_cast<std::size_t>(batch.step_feat.rows()) != N) {
    throw DimensionError("denoise batch does not match the model configuration");
  }
  const Weights weights(params);
  const auto groups = token_groups(cfg);
  const std::size_t L = token_count(cfg);
  const std::size_t D = cfg.d_model;
  const Dims dims{N, L, D, cfg.heads, D / cfg.heads};
  const auto Li = static_cast<Eigen::Index>(L);
  const auto Di = static_cast<Eigen::Index>(D);

  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c = ForwardCache{};
  c.batch = N;

  // Conditioning: c = Wa f_a + ba + Ws f_s + bs, then SiLU and per-block modulation.
  c.cond_pre = linear(batch.appearance, view(weights, "cond.wa"), view(weights, "cond.ba"));
  c.cond_pre += linear(batch.step_feat, view(weights, "cond.ws"), view(weights, "cond.bs"));
  c.cond_act = c.cond_pre.unaryExpr([](double z) { return silu(z); });
  if (cache) {
    c.appearance = batch.appearance;
    c.step_feat = batch.step_feat;
  }
  c.mods.reserve(cfg.blocks);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    c.mods.push_back(linear(c.cond_act, view(weights, block_name(b, "mod.w")), view(weights, block_name(b, "mod.b"))));
  }

  // Patch embedding.
  Mat x(static_cast<Eigen::Index>(N) * Li, Di);
  const auto pos = view(weights, "pos");
  std::size_t offset = 0;
  c.groups.resize(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const TokenGroup& g = groups[gi];
    ForwardCache::Group& gc = c.groups[gi];
    const auto nt = static_cast<Eigen::Index>(g.tokens);
    const auto P = static_cast<Eigen::Index>(g.patch_len);
    gc.patches.setZero(static_cast<Eigen::Index>(N) * nt, P);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(N); ++i) {
      for (Eigen::Index t = 0; t < nt; ++t) {
        for (Eigen::Index e = 0; e < P; ++e) {
          const int idx = g.gather[static_cast<std::size_t>(t * P + e)];
          if (idx >= 0) gc.patches(i * nt + t, e) = batch.images(i, idx);
        }
      }
    }
    gc.pre = linear(gc.patches, view(weights, "embed." + g.name + ".w1"), view(weights, "embed." + g.name + ".b1"));
    gc.hidden = gc.pre.cwiseMax(0.0);
    const Mat emb = linear(gc.hidden, view(weights, "embed." + g.name + ".w2"), view(weights, "embed." + g.name + ".b2"));
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(N); ++i) {
      x.block(i * Li + static_cast<Eigen::Index>(offset), 0, nt, Di) =
          emb.block(i * nt, 0, nt, Di) + pos.block(static_cast<Eigen::Index>(offset), 0, nt, Di);
    }
    offset += g.tokens;
  }

  // Transformer blocks with modulated pre-normalization and gated residuals.
  c.blocks.resize(cfg.blocks);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    ForwardCache::Block& bc = c.blocks[b];
    const Mat& mod = c.mods[b];
    bc.x_in = x;
    layer_norm(x, bc.n1, bc.rstd1);
    bc.u1 = modulate(bc.n1, mod, 0, D, L, D);
    bc.qkv = linear(bc.u1, view(weights, block_name(b, "qkv.w")), view(weights, block_name(b, "qkv.b")));
    attention_forward(bc.qkv, dims, bc.probs, bc.attn);
    bc.proj = linear(bc.attn, view(weights, block_name(b, "proj.w")), view(weights, block_name(b, "proj.b")));
    gated_add(x, bc.proj, mod, 2 * D, L, D);

    bc.x_mid = x;
    layer_norm(x, bc.n2, bc.rstd2);
    bc.u2 = modulate(bc.n2, mod, 3 * D, 4 * D, L, D);
    bc.z1 = linear(bc.u2, view(weights, block_name(b, "ffn1.w")), view(weights, block_name(b, "ffn1.b")));
    bc.hid = bc.z1.unaryExpr([](double z) { return silu(z); });
    bc.ffn = linear(bc.hid, view(weights, block_name(b, "ffn2.w")), view(weights, block_name(b, "ffn2.b")));
    gated_add(x, bc.ffn, mod, 5 * D, L, D);
  }
  c.x_final = x;

  // Orientation heads, overlap averaging, per-slice softmax.
  const std::vector<double> inv_cover = inverse_cover(cfg, groups);
  Mat raw = Mat::Zero(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(shape.size()));
  offset = 0;
  for (const TokenGroup& g : groups) {
    const auto nt = static_cast<Eigen::Index>(g.tokens);
    const auto P = static_cast<Eigen::Index>(g.patch_len);
    Mat xg(static_cast<Eigen::Index>(N) * nt, Di);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(N); ++i) {
      xg.block(i * nt, 0, nt, Di) = x.block(i * Li + static_cast<Eigen::Index>(offset), 0, nt, Di);
    }
    const Mat out = linear(xg, view(weights, "head." + g.name + ".w"), view(weights, "head." + g.name + ".b"));
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(N); ++i) {
      for (Eigen::Index t = 0; t < nt; ++t) {
        for (Eigen::Index e = 0; e < P; ++e) {
          const int idx = g.gather[static_cast<std::size_t>(t * P + e)];
          if (idx >= 0) raw(i, idx) += out(i * nt + t, e) * inv_cover[static_cast<std::size_t>(idx)];
        }
      }
    }
    offset += g.tokens;
  }
  if (!raw.allFinite()) throw NonFiniteError("denoiser produced non-finite activations");

  Mat y(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    for (std::size_t w = 0; w < shape.w; ++w) {
      double hi = -std::numeric_limits<double>::infinity();
      for (std::size_t h = 0; h < shape.h; ++h)
        for (std::size_t ch = 0; ch < 2; ++ch) hi = std::max(hi, raw(i, static_cast<Eigen::Index>(shape.index(h, w, ch))));
      double z = 0.0;
      for (std::size_t h = 0; h < shape.h; ++h)
        for (std::size_t ch = 0; ch < 2; ++ch) {
          const auto j = static_cast<Eigen::Index>(shape.index(h, w, ch));
          y(i, j) = std::exp(raw(i, j) - hi);
          z += y(i, j);
        }
      for (std::size_t h = 0; h < shape.h; ++h)
        for (std::size_t ch = 0; ch < 2; ++ch) y(i, static_cast<Eigen::Index>(shape.index(h, w, ch))) /= z;
    }
  }
  if (cache) {
    c.out = y;
    c.ready = true;
  }
  return y;
}

void backward(const DenoiserParams& params, const ForwardCache& cache, const Mat& grad_out,
              std::span<double> grad_accum) {
  if (!cache.ready) throw Error("backward called without a cached forward pass");
  const DenoiserConfig& cfg = params.config();
  const HoiShape shape = cfg.shape();
  const std::size_t N = cache.batch;
  if (grad_out.rows() != cache.out.rows() || grad_out.cols() != cache.out.cols()) {
    throw DimensionError("output gradient shape mismatch");
  }
  if (grad_accum.size() != params.parameter_count()) {
    throw DimensionError("gradient buffer size mismatch");
  }
  const ParamLayout& layout = params.layout();
  const auto groups = token_groups(cfg);
  const std::size_t L = token_count(cfg);
  const std::size_t D = cfg.d_model;
  const Dims dims{N, L, D, cfg.heads, D / cfg.heads};
  const auto Li = static_cast<Eigen::Index>(L);
  const auto Di = static_cast<Eigen::Index>(D);
  const Weights weights(params);
  AlignedBuffer accum(grad_accum.size(), 0.0);
  const auto G = [&](const std::string& name) { return grad_view(layout, accum, name); };

  // Per-slice softmax.
  const Mat& y = cache.out;
  Mat draw(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    for (std::size_t w = 0; w < shape.w; ++w) {
      double dot = 0.0;
      for (std::size_t h = 0; h < shape.h; ++h)
        for (std::size_t ch = 0; ch < 2; ++ch) {
          const auto j = static_cast<Eigen::Index>(shape.index(h, w, ch));
          dot += y(i, j) * grad_out(i, j);
        }
      for (std::size_t h = 0; h < shape.h; ++h)
        for (std::size_t ch = 0; ch < 2; ++ch) {
          const auto j = static_cast<Eigen::Index>(shape.index(h, w, ch));
          draw(i, j) = y(i, j) * (grad_out(i, j) - dot);
        }
    }
  }

  // Heads.
  const std::vector<double> inv_cover = inverse_cover(cfg, groups);
  Mat dx = Mat::Zero(static_cast<Eigen::Index>(N) * Li, Di);
  std::size_t offset = 0;
  for (const TokenGroup& g : groups) {
    const auto nt = static_cast<Eigen::Index>(g.tokens);
    const auto P = static_cast<Eigen::Index>(g.patch_len);
    Mat xg(static_cast<Eigen::Index>(N) * nt, Di);
    Mat dout = Mat::Zero(static_cast<Eigen::Index>(N) * nt, P);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(N); ++i) {
      xg.block(i * nt, 0, nt, Di) = cache.x_final.block(i * Li + static_cast<Eigen::Index>(offset), 0, nt, Di);
      for (Eigen::Index t = 0; t < nt; ++t) {
        for (Eigen::Index e = 0; e < P; ++e) {
          const int idx = g.gather[static_cast<std::size_t>(t * P + e)];
          if (idx >= 0) dout(i * nt + t, e) = draw(i, idx) * inv_cover[static_cast<std::size_t>(idx)];
        }
      }
    }
    const Mat dxg = linear_backward(xg, view(weights, "head." + g.name + ".w"), dout,
                                    G("head." + g.name + ".w"), G("head." + g.name + ".b"));
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(N); ++i) {
      dx.block(i * Li + static_cast<Eigen::Index>(offset), 0, nt, Di) += dxg.block(i * nt, 0, nt, Di);
    }
    offset += g.tokens;
  }

  // Blocks in reverse.
  std::vector<Mat> dmods(cfg.blocks);
  for (std::size_t bi = cfg.blocks; bi-- > 0;) {
    const ForwardCache::Block& bc = cache.blocks[bi];
    const Mat& mod = cache.mods[bi];
    Mat& dmod = dmods[bi];
    dmod = Mat::Zero(mod.rows(), mod.cols());

    // Feed-forward branch.
    const Mat dffn = gated_add_backward(dx, bc.ffn, mod, dmod, 5 * D, L, D);
    const Mat dhid = linear_backward(bc.hid, view(weights, block_name(bi, "ffn2.w")), dffn,
                                     G(block_name(bi, "ffn2.w")), G(block_name(bi, "ffn2.b")));
    const Mat dz1 = dhid.cwiseProduct(bc.z1.unaryExpr([](double z) { return silu_grad(z); }));
    const Mat du2 = linear_backward(bc.u2, view(weights, block_name(bi, "ffn1.w")), dz1,
                                    G(block_name(bi, "ffn1.w")), G(block_name(bi, "ffn1.b")));
    const Mat dn2 = modulate_backward(du2, bc.n2, mod, dmod, 3 * D, 4 * D, L, D);
    dx += layer_norm_backward(dn2, bc.n2, bc.rstd2);

    // Attention branch.
    const Mat dproj = gated_add_backward(dx, bc.proj, mod, dmod, 2 * D, L, D);
    const Mat dattn = linear_backward(bc.attn, view(weights, block_name(bi, "proj.w")), dproj,
                                      G(block_name(bi, "proj.w")), G(block_name(bi, "proj.b")));
    const Mat dqkv = attention_backward(bc.qkv, bc.probs, dattn, dims);
    const Mat du1 = linear_backward(bc.u1, view(weights, block_name(bi, "qkv.w")), dqkv,
                                    G(block_name(bi, "qkv.w")), G(block_name(bi, "qkv.b")));
    const Mat dn1 = modulate_backward(du1, bc.n1, mod, dmod, 0, D, L, D);
    dx += layer_norm_backward(dn1, bc.n1, bc.rstd1);
  }

  // Patch embedding and positional terms.
  GradMap dpos = G("pos");
  offset = 0;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const TokenGroup& g = groups[gi];
    const ForwardCache::Group& gc = cache.groups[gi];
    const auto nt = static_cast<Eigen::Index>(g.tokens);
    Mat demb(static_cast<Eigen::Index>(N) * nt, Di);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(N); ++i) {
      demb.block(i * nt, 0, nt, Di) = dx.block(i * Li + static_cast<Eigen::Index>(offset), 0, nt, Di);
      dpos.block(static_cast<Eigen::Index>(offset), 0, nt, Di) += demb.block(i * nt, 0, nt, Di);
    }
    Mat dhidden = linear_backward(gc.hidden, view(weights, "embed." + g.name + ".w2"), demb,
                                  G("embed." + g.name + ".w2"), G("embed." + g.name + ".b2"));
    dhidden = dhidden.cwiseProduct((gc.pre.array() > 0.0).cast<double>().matrix());
    linear_backward(gc.patches, view(weights, "embed." + g.name + ".w1"), dhidden,
                    G("embed." + g.name + ".w1"), G("embed." + g.name + ".b1"));
    offset += g.tokens;
  }

  // Conditioning path.
  Mat dact = Mat::Zero(cache.cond_act.rows(), cache.cond_act.cols());
  for (std::size_t bi = 0; bi < cfg.blocks; ++bi) {
    dact += linear_backward(cache.cond_act, view(weights, block_name(bi, "mod.w")), dmods[bi],
                            G(block_name(bi, "mod.w")), G(block_name(bi, "mod.b")));
  }
  const Mat dpre = dact.cwiseProduct(cache.cond_pre.unaryExpr([](double z) { return silu_grad(z); }));
  linear_backward(cache.appearance, view(weights, "cond.wa"), dpre, G("cond.wa"), G("cond.ba"));
  linear_backward(cache.step_feat, view(weights, "cond.ws"), dpre, G("cond.ws"), G("cond.bs"));
  for (std::size_t i = 0; i < accum.size(); ++i) grad_accum[i] += accum[i];
}

HoiImage denoise(const HoiImage& img_k, const Conditioning& cond, int k,
                 const DenoiserParams& params) {
  const DenoiserConfig& cfg = params.config();
  if (!(img_k.shape() == cfg.shape())) throw DimensionError("image shape does not match model");
  if (k < 1 || static_cast<std::size_t>(k) > cfg.steps) throw RangeError("denoise step out of range");
  if (cond.step_embedding.size() != cfg.d_step) throw DimensionError("step embedding width mismatch");
  DenoiseBatch batch(1, cfg);
  batch.set(0, img_k.data(), cond.appearance, k);
  for (std::size_t j = 0; j < cfg.d_step; ++j) {
    batch.step_feat(0, static_cast<Eigen::Index>(j)) = cond.step_embedding[j];
  }
  const Mat y = denoise_batch(params, batch);
  return HoiImage::from_data(cfg.shape(), std::vector<double>(y.data(), y.data() + y.cols()),
                             kInternalTolerance);
}

}  // namespace hoi
