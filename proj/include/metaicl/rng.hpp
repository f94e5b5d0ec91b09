#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace metaicl {

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

// Mixes an arbitrary number of words into one seed; order-sensitive.
std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts);

// Uniform integer in [0, n). n must be positive.
std::size_t uniform_index(Rng& rng, std::size_t n);

// First `count` entries of a uniformly random permutation of [0, n) (partial
// Fisher-Yates). The result for `count` is a prefix of the result for any
// larger count drawn from an identically seeded engine.
std::vector<std::size_t> sample_without_replacement(Rng& rng, std::size_t n, std::size_t count);

std::string rng_state_string(const Rng& rng);
void restore_rng_state(Rng& rng, const std::string& state);

std::string hex64(std::uint64_t value);

}  // namespace metaicl
