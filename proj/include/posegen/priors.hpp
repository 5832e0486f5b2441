#pragma once

// Latent priors for the pose generator.

#include "posegen/random.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>

namespace posegen {

enum class PriorKind { normal, uniform, spherical };

PriorKind parse_prior_kind(const std::string& name);
std::string to_string(PriorKind kind);

inline constexpr int kDefaultLatentDim = 32;

/// Scales a normal draw onto the unit sphere. Returns false for a zero vector.
bool project_to_sphere(Eigen::Ref<Eigen::RowVectorXd> z);

/// n latent samples of dimension d as rows, deterministic in `seed`.
///   normal:    i.i.d. N(0, 1)
///   uniform:   i.i.d. U[-1, 1]
///   spherical: normal draw divided by its L2 norm (zero draws are redrawn)
Eigen::MatrixXd sample_latent(PriorKind kind, int d, int n, std::uint64_t seed);

/// Same as sample_latent but continues an existing generator stream.
Eigen::MatrixXd sample_latent(PriorKind kind, int d, int n, Rng& rng);

}  // namespace posegen
