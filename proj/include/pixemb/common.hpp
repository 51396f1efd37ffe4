#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pixemb {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape mismatch between operands; message carries the op kind and both shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Out-of-range or otherwise invalid input value.
class ValueError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

// Malformed checkpoint bytes; offset is where parsing failed.
class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::size_t offset)
        : Error(msg + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

using WarnHandler = std::function<void(std::string_view)>;

// Default handler writes to stderr. Tests may install a capturing handler.
void set_warn_handler(WarnHandler handler);
void warn(std::string_view message);

// Deterministic RNG with portable distributions. std::mt19937 output is
// pinned by the standard; the distributions are our own so that streams are
// identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed)
        : engine_(static_cast<std::uint32_t>((seed ^ (seed >> 32)) & 0xffffffffu)) {}

    std::uint32_t next_u32() { return engine_(); }

    // Uniform in [0, 1).
    double uniform01() {
        return static_cast<double>(next_u32()) * (1.0 / 4294967296.0);
    }

    float uniform(float lo, float hi) {
        return lo + static_cast<float>(uniform01() * (static_cast<double>(hi) - lo));
    }

    // Uniform integer in [lo, hi], inclusive.
    int uniform_int(int lo, int hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        auto draw = static_cast<std::uint64_t>(uniform01() * static_cast<double>(span));
        if (draw >= span) draw = span - 1;
        return lo + static_cast<int>(draw);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // Box-Muller; the paired sample is cached.
    float normal(float mean, float stddev);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<int>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937 engine_;
    bool have_spare_ = false;
    float spare_ = 0.0f;
};

// Runs body(begin, end) over [0, total) split into contiguous chunks, one per
// worker. Partitioning depends only on (total, threads), so results are
// reproducible for a fixed thread count.
void parallel_for(std::int64_t total, int threads,
                  const std::function<void(std::int64_t, std::int64_t)>& body);

std::string shape_to_string(const std::vector<int>& shape);

}  // namespace pixemb
