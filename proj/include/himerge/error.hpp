#pragma once

#include <stdexcept>
#include <string>

namespace himerge {

/// Broad failure category. The numeric values double as CLI exit codes.
enum class error_kind : int {
  usage = 1,
  data = 2,
  evaluator = 3,
};

class error : public std::runtime_error {
public:
  error(error_kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  error_kind kind() const noexcept { return kind_; }

private:
  error_kind kind_;
};

struct usage_error : error {
  explicit usage_error(const std::string& what) : error(error_kind::usage, what) {}
};

/// Malformed container files, incompatible checkpoints, fingerprint mismatches.
struct data_error : error {
  explicit data_error(const std::string& what) : error(error_kind::data, what) {}
};

struct eval_error : error {
  explicit eval_error(const std::string& what) : error(error_kind::evaluator, what) {}
};

} // namespace himerge
