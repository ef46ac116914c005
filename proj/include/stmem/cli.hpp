#pragma once

#include <string>

#include "stmem/config.hpp"

namespace stmem {

// Commands: preprocess, synth, split, pretrain, finetune, probe, eval, embed,
// attention, cluster. Artifacts land under config.out_dir. Throws Error on
// any failure; returns 0 on success.
int run(const std::string& command, RunConfig config);

}  // namespace stmem
