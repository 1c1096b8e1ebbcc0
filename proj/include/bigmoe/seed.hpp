#pragma once

#include <cstdint>
#include <initializer_list>

namespace bigmoe {

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Deterministic child seed for a (parent, tags...) path.
inline std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> tags)
{
    std::uint64_t s = splitmix64(parent);
    for (std::uint64_t t : tags)
        s = splitmix64(s ^ splitmix64(t + 0x632BE59BD9B4E019ull));
    return s;
}

} // namespace bigmoe
