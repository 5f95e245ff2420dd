#ifndef PSRLAB_RUNIO_HPP_
#define PSRLAB_RUNIO_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace psrlab {

std::uint64_t fnv1a64(const void* data, std::size_t n);
std::string fnv1a64_hex(const std::string& bytes);

std::string read_text_file(const std::string& path);
void write_text_atomic(const std::string& path, const std::string& content);

std::vector<std::string> read_lines(const std::string& path);

// `git describe --always --dirty` of the working tree, or "unknown".
std::string git_describe();

// Every run writes its effective configuration (sorted key=value lines plus
// seed and provenance header) next to its artifacts.
void write_effective_config(const std::string& path, const std::map<std::string, std::string>& kv);

// Flat key=value config file; '#' starts a comment. Unknown keys are the
// caller's to reject.
std::map<std::string, std::string> parse_config_file(const std::string& path);

}  // namespace psrlab

#endif  // PSRLAB_RUNIO_HPP_
