#ifndef NPF_CHECKPOINT_HPP
#define NPF_CHECKPOINT_HPP

#include <string>

#include "npf/optim.hpp"
#include "npf/param_store.hpp"

namespace npf {

// Binary container: magic "NPFCKPT1", a u32 format version, then repeated
// records (u32 name length, name bytes, u8 dtype tag, u32 rank, u64 extents,
// raw little-endian values). Optimizer state follows as records with the same
// layout under the "opt." prefix; store metadata under "meta.".
inline constexpr char kCheckpointMagic[9] = "NPFCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ParamStore params;
  OptState opt;
  bool has_opt = false;
};

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const OptState* opt = nullptr);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace npf

#endif
