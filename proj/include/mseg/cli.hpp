#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace mseg::cli {

/// Runs one command line (without the program name) and returns the exit
/// code. Subcommands: phantom, pretrain, jointtrain, infer, evaluate,
/// gradcheck.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// 64-bit FNV-1a, as recorded in experiment manifests.
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes);

} // namespace mseg::cli
