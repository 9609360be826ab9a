#pragma once

#include <stdexcept>
#include <string>

namespace rdbm {

// Argument outside the domain of a schedule or transition (e.g. t > T, s > t).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Evaluation at a point where a coefficient diverges (coth at t = T, R at t = 0).
class SingularityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// theta integrates to zero over [0, T]; the bridge coefficients are undefined.
class DegenerateScheduleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConsistencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rdbm
