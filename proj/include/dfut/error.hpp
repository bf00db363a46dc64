#pragma once

#include <stdexcept>
#include <string>

namespace dfut {

enum class Errc {
  unknown_function,
  dead_reference,
  double_drop,
  timeout,
  reconstruction_failed,
  non_reconstructible_root,
  task_failed,
  cancelled,
  inline_too_large,
  object_too_large,
  nothing_to_spill,
  spill_file_missing,
  source_lost,
  node_dead,
  partition_mismatch,
  malformed_record,
  support_mismatch,
  unnormalized,
  validation_failed,
  bad_config,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::unknown_function: return "UnknownFunction";
    case Errc::dead_reference: return "DeadReference";
    case Errc::double_drop: return "DoubleDrop";
    case Errc::timeout: return "Timeout";
    case Errc::reconstruction_failed: return "ReconstructionFailed";
    case Errc::non_reconstructible_root: return "NonReconstructibleRoot";
    case Errc::task_failed: return "TaskFailed";
    case Errc::cancelled: return "Cancelled";
    case Errc::inline_too_large: return "InlineTooLarge";
    case Errc::object_too_large: return "ObjectTooLarge";
    case Errc::nothing_to_spill: return "NothingToSpill";
    case Errc::spill_file_missing: return "SpillFileMissing";
    case Errc::source_lost: return "SourceLost";
    case Errc::node_dead: return "NodeDead";
    case Errc::partition_mismatch: return "PartitionMismatch";
    case Errc::malformed_record: return "MalformedRecord";
    case Errc::support_mismatch: return "SupportMismatch";
    case Errc::unnormalized: return "Unnormalized";
    case Errc::validation_failed: return "ValidationFailed";
    case Errc::bad_config: return "BadConfig";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace dfut
