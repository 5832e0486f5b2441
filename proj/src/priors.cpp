#include "posegen/priors.hpp"

#include <stdexcept>

namespace posegen {

PriorKind parse_prior_kind(const std::string& name) {
  if (name == "normal") return PriorKind::normal;
  if (name == "uniform") return PriorKind::uniform;
  if (name == "spherical") return PriorKind::spherical;
  throw std::invalid_argument("unknown prior kind: " + name);
}

std::string to_string(PriorKind kind) {
  switch (kind) {
    case PriorKind::normal: return "normal";
    case PriorKind::uniform: return "uniform";
    case PriorKind::spherical: return "spherical";
  }
  return "?";
}

bool project_to_sphere(Eigen::Ref<Eigen::RowVectorXd> z) {
  const double n = z.norm();
  if (!(n > 0.0)) return false;
  z /= n;
  return true;
}

Eigen::MatrixXd sample_latent(PriorKind kind, int d, int n, Rng& rng) {
  if (d <= 0) throw std::invalid_argument("sample_latent: dimension must be positive");
  if (n <= 0) throw std::invalid_argument("sample_latent: count must be positive");
  Eigen::MatrixXd z(n, d);
  for (int i = 0; i < n; ++i) {
    switch (kind) {
      case PriorKind::normal:
        for (int j = 0; j < d; ++j) z(i, j) = standard_normal(rng);
        break;
      case PriorKind::uniform:
        for (int j = 0; j < d; ++j) z(i, j) = uniform(rng, -1.0, 1.0);
        break;
      case PriorKind::spherical: {
        Eigen::RowVectorXd row(d);
        do {
          for (int j = 0; j < d; ++j) row(j) = standard_normal(rng);
        } while (!project_to_sphere(row));
        z.row(i) = row;
        break;
      }
      default:
        throw std::invalid_argument("sample_latent: unknown prior kind");
    }
  }
  return z;
}

Eigen::MatrixXd sample_latent(PriorKind kind, int d, int n, std::uint64_t seed) {
  Rng rng(seed);
  return sample_latent(kind, d, n, rng);
}

}  // namespace posegen
