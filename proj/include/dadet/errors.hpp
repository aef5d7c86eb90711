#pragma once

#include <stdexcept>
#include <string>

namespace dadet {

struct ShapeMismatch : std::runtime_error {
  explicit ShapeMismatch(const std::string& m) : std::runtime_error(m) {}
};

struct NearZeroNorm : std::runtime_error {
  explicit NearZeroNorm(const std::string& m) : std::runtime_error(m) {}
};

struct DegenerateBox : std::runtime_error {
  explicit DegenerateBox(const std::string& m) : std::runtime_error(m) {}
};

struct BoxOutsideView : std::runtime_error {
  explicit BoxOutsideView(const std::string& m) : std::runtime_error(m) {}
};

struct EmptyBatch : std::runtime_error {
  explicit EmptyBatch(const std::string& m) : std::runtime_error(m) {}
};

struct ConfigInvalid : std::runtime_error {
  explicit ConfigInvalid(const std::string& m) : std::runtime_error(m) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

struct TrainingDiverged : std::runtime_error {
  explicit TrainingDiverged(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace dadet
