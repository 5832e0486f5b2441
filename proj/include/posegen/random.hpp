#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string_view>

namespace posegen {

using Rng = std::mt19937_64;

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

/// Expands a root seed into an independent per-phase seed keyed by a label.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);

/// Standard normal draws via Box-Muller on mt19937_64 output so sequences do
/// not depend on the standard library's distribution implementation.
double standard_normal(Rng& rng);
double uniform01(Rng& rng);
double uniform(Rng& rng, double lo, double hi);
std::size_t uniform_index(Rng& rng, std::size_t n);

Eigen::MatrixXd normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev);

}  // namespace posegen
