#pragma once

#include "xmodal/linalg.hpp"
#include "xmodal/losses.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace xmodal {

/// Affine map y = W x + b with W stored out x in.
struct Layer {
  Matrix weight;
  Vector bias;

  std::size_t in_dim() const noexcept { return static_cast<std::size_t>(weight.cols()); }
  std::size_t out_dim() const noexcept { return static_cast<std::size_t>(weight.rows()); }
};

/// Parameters (or gradients, which share the layout) of a layered model.
using Parameters = std::vector<Layer>;

Parameters zeros_like(const Parameters& params);
bool same_shapes(const Parameters& a, const Parameters& b) noexcept;
bool all_finite(const Parameters& params) noexcept;
/// y += alpha * x
void axpy(Parameters& y, double alpha, const Parameters& x);
double squared_norm(const Parameters& params) noexcept;
/// |a - b|^2 over every parameter.
double squared_distance(const Parameters& a, const Parameters& b);
bool identical(const Parameters& a, const Parameters& b) noexcept;

enum class Architecture { Linear, Mlp };

/// Trainable encoder F -> D. Linear is a single layer; Mlp is
/// F -> H -> D with max(0, x) between the layers.
struct StudentModel {
  Architecture architecture = Architecture::Linear;
  Parameters layers;

  /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
  static StudentModel create(Architecture arch, std::size_t input_dim, std::size_t embed_dim,
                             std::size_t hidden_dim, std::uint64_t seed);

  std::size_t input_dim() const noexcept;
  std::size_t embed_dim() const noexcept;
  void validate() const;
};

struct ForwardCache {
  /// activations[0] is the input; activations[l + 1] the output of layer l
  /// after its nonlinearity (the last entry is the raw embedding).
  std::vector<Matrix> activations;
};

/// Raw (pre-normalization) embeddings, N x D. Throws ShapeMismatch.
Matrix forward(const StudentModel& model, const Matrix& inputs);
Matrix forward(const StudentModel& model, const Matrix& inputs, ForwardCache& cache);

/// Parameter gradients given dL/d(embeddings). With Reduction::Mean the
/// upstream rows are treated as per-sample gradients and averaged.
Parameters backward(const StudentModel& model, const ForwardCache& cache,
                    const Matrix& grad_embeddings, Reduction reduction = Reduction::Sum);
Parameters backward(const StudentModel& model, const Matrix& inputs,
                    const Matrix& grad_embeddings, Reduction reduction = Reduction::Sum);

/// EMA shadow of a StudentModel.
struct MomentumStudent {
  StudentModel shadow;
  double momentum = 0.99;

  static MomentumStudent track(const StudentModel& source, double momentum);
};

/// theta_hat <- m * theta_hat + (1 - m) * theta, elementwise.
void ema_update(MomentumStudent& shadow, const StudentModel& source, double momentum);
inline void ema_update(MomentumStudent& shadow, const StudentModel& source) {
  ema_update(shadow, source, shadow.momentum);
}

/// D -> P projection used only during self-supervised pretraining.
struct ProjectionHead {
  Layer layer;

  static ProjectionHead create(std::size_t embed_dim, std::size_t proj_dim, std::uint64_t seed);
  std::size_t proj_dim() const noexcept { return layer.out_dim(); }
};

inline constexpr std::size_t kDefaultProjectionDim = 128;

/// Feature-space view generator: additive Gaussian noise then coordinate
/// dropout, seeded by (seed, step, view) so every view is reproducible.
struct ViewAugmenter {
  double noise_sigma = 0.1;
  double dropout_rate = 0.1;
  std::uint64_t seed = 0;

  Matrix view(const Matrix& batch, std::uint64_t step, std::uint32_t view_index) const;
};

/// InfoNCE over 2B projections. Rows [0, B) are the first views and rows
/// [B, 2B) the second views, so row i pairs with row (i + B) mod 2B. The
/// projections are l2-normalized internally; the gradient is with respect to
/// the unnormalized rows. Averaged over all 2B anchors. Throws BatchTooSmall.
LossTerm infonce_loss(const Matrix& projections, double temperature);

struct InfoNceStep {
  double loss = 0.0;
  Parameters model_grad;
  Layer head_grad;
};

/// Two views of `batch` -> student -> l2-normalize -> head -> InfoNCE, with
/// gradients for both the student and the head.
InfoNceStep infonce_pretrain_step(const StudentModel& model, const ProjectionHead& head,
                                  const Matrix& batch, const ViewAugmenter& augmenter,
                                  double temperature, std::uint64_t step);

/// Loss only, for the same pipeline with caller-provided views.
double infonce_objective(const StudentModel& model, const ProjectionHead& head,
                         const Matrix& view_a, const Matrix& view_b, double temperature);
InfoNceStep infonce_gradients(const StudentModel& model, const ProjectionHead& head,
                              const Matrix& view_a, const Matrix& view_b, double temperature);

/// Contents of an "XMS1" checkpoint.
struct Checkpoint {
  StudentModel model;
  MomentumStudent shadow;
  std::uint64_t step = 0;
  std::optional<ProjectionHead> head;

  bool operator==(const Checkpoint& other) const;
};

/// Parameters are stored as little-endian float64 so a reloaded model
/// reproduces its embeddings exactly.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace xmodal
