#pragma once

#include <stdexcept>
#include <string>

namespace submerge {

// Malformed or inconsistent archive content; the message names the
// offending record where one exists.
class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A store or routing input violating a structural invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Polar factor requested for a numerically rank-deficient matrix.
class RankDeficientError : public std::runtime_error {
 public:
  explicit RankDeficientError(int deficiency)
      : std::runtime_error("rank-deficient matrix (" + std::to_string(deficiency) +
                           " vanishing singular values)"),
        deficiency_(deficiency) {}
  int deficiency() const { return deficiency_; }

 private:
  int deficiency_;
};

}  // namespace submerge
