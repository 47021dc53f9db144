#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hoi/core_types.hpp"
#include "hoi/rng.hpp"

namespace hoi {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// How an image is cut into tokens. `slice` is the H horizontal + W vertical
// slice layout; the others exist for ablations.
enum class PatchMode { slice, local, horizontal, vertical };

std::string to_string(PatchMode mode);
PatchMode parse_patch_mode(std::string_view name);

struct DenoiserConfig {
  std::size_t h = 6;
  std::size_t w = 5;
  std::size_t d_model = 128;
  std::size_t blocks = 4;
  std::size_t heads = 4;
  std::size_t d_appearance = 32;
  std::size_t d_step = 64;
  std::size_t ffn_mult = 4;
  std::size_t steps = 50;  // K, recorded so checkpoints carry their schedule length
  PatchMode patch_mode = PatchMode::slice;
  std::size_t local_patch_h = 2;
  std::size_t local_patch_w = 2;

  HoiShape shape() const { return {h, w}; }
  void check() const;
};

/// Tokens sharing one patch length and one embedding/head weight set.
struct TokenGroup {
  std::string name;
  std::size_t tokens = 0;
  std::size_t patch_len = 0;
  // tokens * patch_len image indices; -1 marks padding outside the image.
  std::vector<int> gather;
};

std::vector<TokenGroup> token_groups(const DenoiserConfig& cfg);
std::size_t token_count(const DenoiserConfig& cfg);

struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const noexcept { return rows * cols; }
};

/// Canonical parameter order. Checkpoints store tensors in exactly this order.
class ParamLayout {
 public:
  explicit ParamLayout(const DenoiserConfig& cfg);

  const std::vector<TensorSlot>& tensors() const noexcept { return tensors_; }
  const TensorSlot& at(std::string_view name) const;
  std::size_t total() const noexcept { return total_; }

 private:
  void add(std::string name, std::size_t rows, std::size_t cols);

  std::vector<TensorSlot> tensors_;
  std::size_t total_ = 0;
};

std::size_t parameter_count(const DenoiserConfig& cfg);

class DenoiserParams {
 public:
  // All-zero parameters.
  explicit DenoiserParams(DenoiserConfig cfg);

  static DenoiserParams initialized(DenoiserConfig cfg, Rng& rng);

  const DenoiserConfig& config() const noexcept { return cfg_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  std::size_t parameter_count() const noexcept { return values_.size(); }

  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }
  std::vector<double>& grads() noexcept { return grads_; }
  const std::vector<double>& grads() const noexcept { return grads_; }
  void zero_grad();

  Eigen::Map<const Mat> tensor(std::string_view name) const;
  Eigen::Map<Mat> tensor(std::string_view name);

  bool all_finite() const;

 private:
  DenoiserConfig cfg_;
  ParamLayout layout_;
  std::vector<double> values_;
  std::vector<double> grads_;
};

// Sinusoidal embedding of step k: first half sin(k f_i), second half cos(k f_i)
// with f_i = 10000^(-i / (d/2)).
std::vector<double> step_embedding(int k, std::size_t d_step);

struct Conditioning {
  std::vector<double> appearance;      // f_a
  std::vector<double> step_embedding;  // f_s^k

  static Conditioning make(std::span<const double> appearance, int k, std::size_t d_step);
};

struct PatchSet {
  HoiShape shape;
  std::vector<std::vector<double>> horizontal;  // H patches of W x 2, (w, c) order
  std::vector<std::vector<double>> vertical;    // W patches of H x 2, (h, c) order

  std::size_t size() const noexcept { return horizontal.size() + vertical.size(); }
};

PatchSet slice_patchify(const HoiImage& img);
// Mean of the horizontal and vertical readings of every pixel.
std::vector<double> slice_depatchify(const PatchSet& patches);

// Slice-mode token embedding (two-layer perceptron per orientation plus the
// learned positional term). Rows are horizontal tokens then vertical tokens.
Mat patches_to_tokens(const PatchSet& patches, const DenoiserParams& params);

/// A batch of denoiser inputs, one row per sample.
struct DenoiseBatch {
  Mat images;      // N x (H W 2), raw values (valid images in multinomial mode)
  Mat appearance;  // N x D_a
  Mat step_feat;   // N x D_s

  DenoiseBatch() = default;
  DenoiseBatch(std::size_t n, const DenoiserConfig& cfg);

  std::size_t size() const noexcept { return static_cast<std::size_t>(images.rows()); }
  void set(std::size_t row, std::span<const double> image, std::span<const double> appearance_row,
           int k);
};

struct ForwardCache {
  struct Group {
    Mat patches;
    Mat pre;
    Mat hidden;
  };
  struct Block {
    Mat x_in, n1, u1, qkv, probs, attn, proj;
    Mat x_mid, n2, u2, z1, hid, ffn;
    Eigen::VectorXd rstd1, rstd2;
  };

  bool ready = false;
  std::size_t batch = 0;
  Mat appearance, step_feat, cond_pre, cond_act;
  std::vector<Mat> mods;
  std::vector<Group> groups;
  std::vector<Block> blocks;
  Mat x_final;
  Mat out;  // softmax-projected output
};

// Predicts clean images for every row of the batch. Output rows are valid
// HOI images. When `cache` is given, activations for backward are stored.
Mat denoise_batch(const DenoiserParams& params, const DenoiseBatch& batch,
                  ForwardCache* cache = nullptr);

// Accumulates d(loss)/d(params) into `grad_accum` (same layout as values).
void backward(const DenoiserParams& params, const ForwardCache& cache, const Mat& grad_out,
              std::span<double> grad_accum);

HoiImage denoise(const HoiImage& img_k, const Conditioning& cond, int k,
                 const DenoiserParams& params);

}  // namespace hoi
