#pragma once

#include <stdexcept>
#include <string>

namespace dvi {

// Inconsistent shapes, unknown primitives, bad partition membership and the like.
class StructuralError : public std::invalid_argument {
 public:
  explicit StructuralError(const std::string& what) : std::invalid_argument(what) {}
};

// Training produced a non-finite loss or gradient.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dvi
