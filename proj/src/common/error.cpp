#include "muffin/error.hpp"

namespace muffin {

std::string_view error_prefix(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Config: return "CONFIG/ ";
    case ErrorKind::Data: return "DATA/ ";
    case ErrorKind::Io: return "IO/ ";
    case ErrorKind::Numeric: return "NUMERIC/ ";
    case ErrorKind::Shape: return "SHAPE/ ";
    case ErrorKind::Index: return "INDEX/ ";
    case ErrorKind::State: return "STATE/ ";
    case ErrorKind::Contract: return "CONTRACT/ ";
  }
  return "ERROR/ ";
}

}  // namespace muffin
