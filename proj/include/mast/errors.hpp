#pragma once

#include <stdexcept>

namespace mast {

// Error taxonomy shared by every module.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace mast
