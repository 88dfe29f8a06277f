#include "xmodal/student.hpp"

#include "xmodal/embedding_store.hpp"
#include "xmodal/error.hpp"

#include "binary_io.hpp"

#include <cmath>
#include <random>
#include <string>

namespace xmodal {

namespace {

constexpr std::array<char, 4> kCheckpointMagic = {'X', 'M', 'S', '1'};
constexpr std::uint32_t kFlagHasHead = 1u << 0;

Layer uniform_layer(std::size_t in_dim, std::size_t out_dim, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Layer layer{Matrix(out_dim, in_dim), Vector(out_dim)};
  for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = dist(rng);
  for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = dist(rng);
  return layer;
}

Matrix affine(const Layer& layer, const Matrix& x) {
  Matrix y = x * layer.weight.transpose();
  y.rowwise() += layer.bias.transpose();
  return y;
}

bool same_shape(const Layer& a, const Layer& b) noexcept {
  return a.weight.rows() == b.weight.rows() && a.weight.cols() == b.weight.cols() &&
         a.bias.size() == b.bias.size();
}

void require_same_shapes(const Parameters& a, const Parameters& b, const char* what) {
  if (!same_shapes(a, b)) throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": parameter shapes differ");
}

void write_layer_shape(detail::Writer& out, const Layer& layer) {
  out.u32(static_cast<std::uint32_t>(layer.out_dim()));
  out.u32(static_cast<std::uint32_t>(layer.in_dim()));
}

void write_layer_values(detail::Writer& out, const Layer& layer) {
  for (Eigen::Index i = 0; i < layer.weight.size(); ++i) out.f64(layer.weight.data()[i]);
  for (Eigen::Index i = 0; i < layer.bias.size(); ++i) out.f64(layer.bias(i));
}

Layer read_layer_values(detail::Reader& in, std::uint32_t out_dim, std::uint32_t in_dim) {
  in.need(static_cast<std::size_t>(out_dim) * (in_dim + 1) * 8, "checkpoint parameters");
  Layer layer{Matrix(out_dim, in_dim), Vector(out_dim)};
  for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = in.f64("weights");
  for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = in.f64("bias");
  return layer;
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameter arithmetic

Parameters zeros_like(const Parameters& params) {
  Parameters out;
  out.reserve(params.size());
  for (const auto& layer : params) {
    out.push_back({Matrix::Zero(layer.weight.rows(), layer.weight.cols()), Vector::Zero(layer.bias.size())});
  }
  return out;
}

bool same_shapes(const Parameters& a, const Parameters& b) noexcept {
  if (a.size() != b.size()) return false;
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (!same_shape(a[l], b[l])) return false;
  }
  return true;
}

bool all_finite(const Parameters& params) noexcept {
  for (const auto& layer : params) {
    if (!layer.weight.allFinite() || !layer.bias.allFinite()) return false;
  }
  return true;
}

void axpy(Parameters& y, double alpha, const Parameters& x) {
  require_same_shapes(y, x, "axpy");
  for (std::size_t l = 0; l < y.size(); ++l) {
    y[l].weight += alpha * x[l].weight;
    y[l].bias += alpha * x[l].bias;
  }
}

double squared_norm(const Parameters& params) noexcept {
  double total = 0.0;
  for (const auto& layer : params) total += layer.weight.squaredNorm() + layer.bias.squaredNorm();
  return total;
}

double squared_distance(const Parameters& a, const Parameters& b) {
  require_same_shapes(a, b, "squared_distance");
  double total = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l) {
    total += (a[l].weight - b[l].weight).squaredNorm() + (a[l].bias - b[l].bias).squaredNorm();
  }
  return total;
}

bool identical(const Parameters& a, const Parameters& b) noexcept {
  if (!same_shapes(a, b)) return false;
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (!identical(a[l].weight, b[l].weight)) return false;
    if (!identical(Matrix(a[l].bias.transpose()), Matrix(b[l].bias.transpose()))) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// StudentModel

StudentModel StudentModel::create(Architecture arch, std::size_t input_dim, std::size_t embed_dim,
                                  std::size_t hidden_dim, std::uint64_t seed) {
  if (input_dim == 0 || embed_dim == 0 || (arch == Architecture::Mlp && hidden_dim == 0)) {
    throw Error(ErrorCode::InvalidConfig, "student dimensions must be positive");
  }
  std::mt19937_64 rng(seed);
  StudentModel model;
  model.architecture = arch;
  if (arch == Architecture::Linear) {
    model.layers.push_back(uniform_layer(input_dim, embed_dim, rng));
  } else {
    model.layers.push_back(uniform_layer(input_dim, hidden_dim, rng));
    model.layers.push_back(uniform_layer(hidden_dim, embed_dim, rng));
  }
  return model;
}

std::size_t StudentModel::input_dim() const noexcept {
  return layers.empty() ? 0 : layers.front().in_dim();
}

std::size_t StudentModel::embed_dim() const noexcept {
  return layers.empty() ? 0 : layers.back().out_dim();
}

void StudentModel::validate() const {
  const std::size_t expected_layers = architecture == Architecture::Linear ? 1 : 2;
  if (layers.size() != expected_layers) {
    throw Error(ErrorCode::ShapeMismatch, "architecture expects " + std::to_string(expected_layers) +
                                              " layers, model has " + std::to_string(layers.size()));
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (static_cast<std::size_t>(layers[l].bias.size()) != layers[l].out_dim()) {
      throw Error(ErrorCode::ShapeMismatch, "bias size does not match layer output", l);
    }
    if (l > 0 && layers[l].in_dim() != layers[l - 1].out_dim()) {
      throw Error(ErrorCode::ShapeMismatch, "layer input does not match previous output", l);
    }
  }
  if (!all_finite(layers)) throw Error(ErrorCode::NonFiniteValue, "student parameters contain NaN/Inf");
}

Matrix forward(const StudentModel& model, const Matrix& inputs) {
  ForwardCache cache;
  return forward(model, inputs, cache);
}

Matrix forward(const StudentModel& model, const Matrix& inputs, ForwardCache& cache) {
  if (static_cast<std::size_t>(inputs.cols()) != model.input_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "input width " + std::to_string(inputs.cols()) +
                                              " != model input dim " + std::to_string(model.input_dim()));
  }
  cache.activations.clear();
  cache.activations.push_back(inputs);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    Matrix out = affine(model.layers[l], cache.activations.back());
    if (l + 1 < model.layers.size()) out = out.cwiseMax(0.0);
    cache.activations.push_back(std::move(out));
  }
  return cache.activations.back();
}

Parameters backward(const StudentModel& model, const ForwardCache& cache,
                    const Matrix& grad_embeddings, Reduction reduction) {
  if (cache.activations.size() != model.layers.size() + 1) {
    throw Error(ErrorCode::ShapeMismatch, "forward cache does not belong to this model");
  }
  const Matrix& output = cache.activations.back();
  if (grad_embeddings.rows() != output.rows() || grad_embeddings.cols() != output.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "upstream gradient is " + std::to_string(grad_embeddings.rows()) +
                                              "x" + std::to_string(grad_embeddings.cols()) +
                                              ", embeddings are " + std::to_string(output.rows()) + "x" +
                                              std::to_string(output.cols()));
  }
  Matrix grad = grad_embeddings;
  if (reduction == Reduction::Mean && grad.rows() > 0) grad /= static_cast<double>(grad.rows());

  Parameters out = zeros_like(model.layers);
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    const Matrix& input = cache.activations[l];
    out[l].weight.noalias() = grad.transpose() * input;
    out[l].bias = grad.colwise().sum().transpose();
    if (l > 0) {
      Matrix upstream = grad * model.layers[l].weight;
      // ReLU mask from the post-activation values.
      grad = upstream.cwiseProduct((input.array() > 0.0).cast<double>().matrix());
    }
  }
  return out;
}

Parameters backward(const StudentModel& model, const Matrix& inputs, const Matrix& grad_embeddings,
                    Reduction reduction) {
  ForwardCache cache;
  forward(model, inputs, cache);
  return backward(model, cache, grad_embeddings, reduction);
}

// ---------------------------------------------------------------------------
// EMA

MomentumStudent MomentumStudent::track(const StudentModel& source, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "EMA momentum must lie in [0, 1]");
  }
  return {source, momentum};
}

void ema_update(MomentumStudent& shadow, const StudentModel& source, double momentum) {
  require_same_shapes(shadow.shadow.layers, source.layers, "ema_update");
  const double keep = momentum;
  const double take = 1.0 - momentum;
  for (std::size_t l = 0; l < source.layers.size(); ++l) {
    auto& dst = shadow.shadow.layers[l];
    const auto& src = source.layers[l];
    dst.weight = keep * dst.weight + take * src.weight;
    dst.bias = keep * dst.bias + take * src.bias;
  }
}

// ---------------------------------------------------------------------------
// Self-supervised pretraining

ProjectionHead ProjectionHead::create(std::size_t embed_dim, std::size_t proj_dim, std::uint64_t seed) {
  if (proj_dim < 2) throw Error(ErrorCode::InvalidConfig, "projection dim must be >= 2");
  std::mt19937_64 rng(seed);
  return {uniform_layer(embed_dim, proj_dim, rng)};
}

Matrix ViewAugmenter::view(const Matrix& batch, std::uint64_t step, std::uint32_t view_index) const {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32), view_index};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution drop(dropout_rate);
  Matrix out = batch;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const double value = out.data()[i] + noise_sigma * noise(rng);
    out.data()[i] = drop(rng) ? 0.0 : value;
  }
  return out;
}

LossTerm infonce_loss(const Matrix& projections, double temperature) {
  if (!(temperature > 0.0)) {
    throw Error(ErrorCode::NonPositiveTemperature, "InfoNCE temperature must be > 0");
  }
  const Eigen::Index two_b = projections.rows();
  if (two_b < 4 || two_b % 2 != 0) {
    throw Error(ErrorCode::BatchTooSmall,
                "InfoNCE needs two views of at least 2 samples, got " + std::to_string(two_b) + " rows");
  }
  const Eigen::Index b = two_b / 2;
  const Matrix h = l2_normalize(projections);
  const Matrix sims = (h * h.transpose()) / temperature;

  std::vector<double> per_anchor(static_cast<std::size_t>(two_b));
  Matrix grad_sims = Matrix::Zero(two_b, two_b);
  const double scale = 1.0 / static_cast<double>(two_b);
  for (Eigen::Index i = 0; i < two_b; ++i) {
    const Eigen::Index positive = (i + b) % two_b;
    double peak = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < two_b; ++k) {
      if (k != i) peak = std::max(peak, sims(i, k));
    }
    double denom = 0.0;
    for (Eigen::Index k = 0; k < two_b; ++k) {
      if (k != i) denom += std::exp(sims(i, k) - peak);
    }
    const double log_denom = peak + std::log(denom);
    per_anchor[static_cast<std::size_t>(i)] = log_denom - sims(i, positive);
    for (Eigen::Index k = 0; k < two_b; ++k) {
      if (k != i) grad_sims(i, k) = scale * std::exp(sims(i, k) - log_denom);
    }
    grad_sims(i, positive) -= scale;
  }
  const double loss = pairwise_sum(per_anchor) * scale;
  // sims = H H^T / tau
  const Matrix grad_h = (grad_sims + grad_sims.transpose()) * h / temperature;
  return {loss, normalize_backward(projections, grad_h)};
}

namespace {

struct InfoNcePass {
  ForwardCache cache;
  Matrix raw;
  Matrix unit;
  Matrix projections;
};

InfoNcePass infonce_forward(const StudentModel& model, const ProjectionHead& head,
                            const Matrix& view_a, const Matrix& view_b) {
  if (view_a.rows() != view_b.rows() || view_a.cols() != view_b.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "the two views must have the same shape");
  }
  Matrix stacked(view_a.rows() * 2, view_a.cols());
  stacked << view_a, view_b;
  InfoNcePass pass;
  pass.raw = forward(model, stacked, pass.cache);
  pass.unit = l2_normalize(pass.raw);
  pass.projections = affine(head.layer, pass.unit);
  return pass;
}

}  // namespace

double infonce_objective(const StudentModel& model, const ProjectionHead& head, const Matrix& view_a,
                         const Matrix& view_b, double temperature) {
  if (view_a.rows() < 2) throw Error(ErrorCode::BatchTooSmall, "InfoNCE batch must have B >= 2");
  const auto pass = infonce_forward(model, head, view_a, view_b);
  return infonce_loss(pass.projections, temperature).value;
}

InfoNceStep infonce_gradients(const StudentModel& model, const ProjectionHead& head,
                              const Matrix& view_a, const Matrix& view_b, double temperature) {
  if (view_a.rows() < 2) throw Error(ErrorCode::BatchTooSmall, "InfoNCE batch must have B >= 2");
  const auto pass = infonce_forward(model, head, view_a, view_b);
  const auto nce = infonce_loss(pass.projections, temperature);

  InfoNceStep step;
  step.loss = nce.value;
  step.head_grad.weight = nce.grad.transpose() * pass.unit;
  step.head_grad.bias = nce.grad.colwise().sum().transpose();
  const Matrix grad_unit = nce.grad * head.layer.weight;
  const Matrix grad_raw = normalize_backward(pass.raw, grad_unit);
  step.model_grad = backward(model, pass.cache, grad_raw, Reduction::Sum);
  return step;
}

InfoNceStep infonce_pretrain_step(const StudentModel& model, const ProjectionHead& head,
                                  const Matrix& batch, const ViewAugmenter& augmenter,
                                  double temperature, std::uint64_t step) {
  if (batch.rows() < 2) throw Error(ErrorCode::BatchTooSmall, "InfoNCE batch must have B >= 2");
  return infonce_gradients(model, head, augmenter.view(batch, step, 0), augmenter.view(batch, step, 1),
                           temperature);
}

// ---------------------------------------------------------------------------
// Checkpoints

bool Checkpoint::operator==(const Checkpoint& other) const {
  const bool heads_match =
      head.has_value() == other.head.has_value() &&
      (!head || identical(Parameters{head->layer}, Parameters{other.head->layer}));
  return model.architecture == other.model.architecture && identical(model.layers, other.model.layers) &&
         identical(shadow.shadow.layers, other.shadow.shadow.layers) &&
         shadow.momentum == other.shadow.momentum && step == other.step && heads_match;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  checkpoint.model.validate();
  if (!same_shapes(checkpoint.model.layers, checkpoint.shadow.shadow.layers)) {
    throw Error(ErrorCode::ShapeMismatch, "shadow shapes differ from the model");
  }
  detail::Writer out;
  out.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  out.u32(checkpoint.model.architecture == Architecture::Linear ? 0u : 1u);
  out.u32(static_cast<std::uint32_t>(checkpoint.model.layers.size()));
  out.u32(checkpoint.head ? kFlagHasHead : 0u);
  for (const auto& layer : checkpoint.model.layers) write_layer_shape(out, layer);
  for (const auto& layer : checkpoint.model.layers) write_layer_values(out, layer);
  for (const auto& layer : checkpoint.shadow.shadow.layers) write_layer_values(out, layer);
  out.f64(checkpoint.shadow.momentum);
  out.u64(checkpoint.step);
  if (checkpoint.head) {
    write_layer_shape(out, checkpoint.head->layer);
    write_layer_values(out, checkpoint.head->layer);
  }
  detail::write_file(path, out.buffer());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  detail::Reader in(detail::read_file(path, "checkpoint"));
  in.magic(kCheckpointMagic);
  const auto arch = in.u32("architecture");
  if (arch > 1) throw Error(ErrorCode::MalformedHeader, "unknown architecture tag " + std::to_string(arch));
  const auto num_layers = in.u32("layer count");
  const auto flags = in.u32("flags");
  if (num_layers == 0 || num_layers > 2) {
    throw Error(ErrorCode::MalformedHeader, "bad layer count " + std::to_string(num_layers));
  }
  std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes;
  for (std::uint32_t l = 0; l < num_layers; ++l) {
    const auto out_dim = in.u32("layer shape");
    const auto in_dim = in.u32("layer shape");
    shapes.emplace_back(out_dim, in_dim);
  }
  Checkpoint ckpt;
  ckpt.model.architecture = arch == 0 ? Architecture::Linear : Architecture::Mlp;
  for (const auto& [o, i] : shapes) ckpt.model.layers.push_back(read_layer_values(in, o, i));
  ckpt.shadow.shadow.architecture = ckpt.model.architecture;
  for (const auto& [o, i] : shapes) ckpt.shadow.shadow.layers.push_back(read_layer_values(in, o, i));
  ckpt.shadow.momentum = in.f64("momentum");
  ckpt.step = in.u64("step");
  if (flags & kFlagHasHead) {
    const auto o = in.u32("head shape");
    const auto i = in.u32("head shape");
    ckpt.head = ProjectionHead{read_layer_values(in, o, i)};
  }
  if (!in.done()) throw Error(ErrorCode::MalformedHeader, "trailing bytes in checkpoint");
  ckpt.model.validate();
  ckpt.shadow.shadow.validate();
  return ckpt;
}

}  // namespace xmodal
