#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace latentsub {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class ShapeMismatch : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Output regime of the black-box target.
enum class OutputMode { Probability, LabelOnly };

/// Pipeline stage a query is billed to.
enum class Stage { Stage1, Stage2, Eval };

std::string_view to_string(OutputMode mode);
std::string_view to_string(Stage stage);
OutputMode parse_output_mode(std::string_view text);
Stage parse_stage(std::string_view text);

/// Mixes a base seed with a stream of integers (splitmix64 finalizer per word).
/// Every randomized operation derives its own stream this way so that results
/// depend only on (seed, position) and not on call order.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

} // namespace latentsub
