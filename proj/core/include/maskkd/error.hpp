#pragma once

#include <stdexcept>
#include <string>

namespace maskkd {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class RankError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class InvariantError : public Error {
 public:
  using Error::Error;
};

class EnumError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// KL(p||q) with q_y = 0 where p_y > 0.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Optimizer asked to step a parameter that never received a gradient.
class UnreadyParameterError : public Error {
 public:
  using Error::Error;
};

class TrainingAbort : public Error {
 public:
  using Error::Error;
};

}  // namespace maskkd
