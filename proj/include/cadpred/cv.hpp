#pragma once

#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "cadpred/rng.hpp"

namespace cadpred {

/// Fold id per row: seeded shuffle dealt round-robin into k near-equal parts.
/// Depends only on (n, k, seed).
inline std::vector<std::size_t> assign_folds(std::size_t n, std::size_t k, std::uint64_t seed)
{
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "cv-folds", n));
    rng.shuffle(std::span(order));
    std::vector<std::size_t> fold(n);
    for (std::size_t i = 0; i < n; ++i)
        fold[order[i]] = i % k;
    return fold;
}

} // namespace cadpred
