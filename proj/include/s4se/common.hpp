#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace s4se {

// Error hierarchy. Exit-code mapping (see tools/): config=2, data=3, numeric=4.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidDelta : ConfigError {
    using ConfigError::ConfigError;
};
struct DimensionMismatch : ConfigError {
    using ConfigError::ConfigError;
};
struct ShapeMismatch : ConfigError {
    using ConfigError::ConfigError;
};
struct ConfigMismatch : ConfigError {
    using ConfigError::ConfigError;
};
struct SingularMatrix : NumericError {
    using NumericError::NumericError;
};
struct NumericalInstability : NumericError {
    using NumericError::NumericError;
};
struct NonFiniteActivation : NumericError {
    using NumericError::NumericError;
};
struct ColaViolation : NumericError {
    using NumericError::NumericError;
};
struct SignalTooShort : DataError {
    using DataError::DataError;
};
struct InsufficientData : DataError {
    using DataError::DataError;
};
struct ZeroReference : DataError {
    using DataError::DataError;
};
struct ZeroPowerInput : DataError {
    using DataError::DataError;
};
struct UnsupportedFormat : DataError {
    using DataError::DataError;
};
struct CorruptHeader : DataError {
    using DataError::DataError;
};

// Counter-based 64-bit PRNG (splitmix64). Named in configs as "splitmix64";
// identical streams on every platform for a given (seed, counter).
class Rng {
  public:
    explicit Rng(uint64_t seed = 0, uint64_t counter = 0) : seed_(seed), counter_(counter) {}

    uint64_t next_u64() {
        uint64_t z = seed_ + 0x9e3779b97f4a7c15ULL * (++counter_);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one fresh pair per call pair.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return next_u64() % n; }

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }
    void restore(uint64_t seed, uint64_t counter) {
        seed_ = seed;
        counter_ = counter;
        have_spare_ = false;
    }

  private:
    uint64_t seed_;
    uint64_t counter_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

constexpr double kPi = 3.14159265358979323846264338327950288;

}  // namespace s4se
