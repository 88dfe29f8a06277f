#pragma once

#include "xmodal/embedding_store.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace xmodal {

/// A desk-scale stand-in for a frozen multimodal teacher whose geometry is
/// known exactly.
struct SynthSpec {
  std::size_t num_classes = 10;
  std::size_t embed_dim = 16;
  std::size_t samples_per_class = 200;
  double noise_sigma = 0.1;
  std::size_t input_dim = 32;
  /// Extra Gaussian noise on the raw inputs (after mixing).
  double input_noise = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthOutput {
  DatasetBundle bundle;
  std::vector<std::int32_t> truth;
  /// F x D map taking pre-normalization teacher vectors to raw inputs.
  Matrix mixing;
};

/// Anchors are orthonormal (QR of a seeded Gaussian) when M <= D. Sample
/// (c, i) has teacher embedding normalize(a_c + sigma * g) and raw input
/// mixing * (a_c + sigma * g). All stored values are float32-representable,
/// so generate -> save -> load is bit-exact.
///
/// With M > D orthogonality is impossible: a warning is logged and the
/// anchors are spread by repulsion on the sphere instead.
SynthOutput generate(const SynthSpec& spec);

/// `id,label` rows.
void write_truth_csv(const DatasetBundle& bundle, const std::vector<std::int32_t>& truth,
                     const std::filesystem::path& path);

}  // namespace xmodal
