#include "hoi/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace hoi {

namespace {

constexpr std::array<char, 4> kMagic{'H', 'I', 'D', 'F'};

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<unsigned char>((value >> (8 * i)) & 0xFFu));
  }
}

template <typename T>
T get_le(const std::vector<unsigned char>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw IoError("checkpoint truncated");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(in[pos + i]) << (8 * i);
  pos += sizeof(T);
  return value;
}

std::uint32_t mode_code(PatchMode m) {
  switch (m) {
    case PatchMode::slice: return 0;
    case PatchMode::local: return 1;
    case PatchMode::horizontal: return 2;
    case PatchMode::vertical: return 3;
  }
  return 0;
}

PatchMode mode_from_code(std::uint32_t code) {
  switch (code) {
    case 0: return PatchMode::slice;
    case 1: return PatchMode::local;
    case 2: return PatchMode::horizontal;
    case 3: return PatchMode::vertical;
    default: throw IoError("checkpoint has unknown patch mode " + std::to_string(code));
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const DenoiserParams& params) {
  const DenoiserConfig& c = params.config();
  std::vector<unsigned char> bytes(kMagic.begin(), kMagic.end());
  put_le<std::uint32_t>(bytes, kCheckpointVersion);
  for (std::size_t v : {c.h, c.w, c.d_model, c.blocks, c.heads, c.d_appearance, c.d_step, c.steps}) {
    put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(v));
  }
  put_le<std::uint32_t>(bytes, mode_code(c.patch_mode));
  put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(c.ffn_mult));
  put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(c.local_patch_h));
  put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(c.local_patch_w));
  put_le<std::uint64_t>(bytes, params.parameter_count());
  for (double v : params.values()) put_le<std::uint64_t>(bytes, std::bit_cast<std::uint64_t>(v));

  // Write to a sibling temp file first so an interrupted save leaves the old file intact.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

DenoiserParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic.data(), 4) != 0) {
    throw IoError("not a checkpoint file (bad magic): " + path.string());
  }
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  DenoiserConfig c;
  std::size_t* fields[] = {&c.h, &c.w, &c.d_model, &c.blocks, &c.heads, &c.d_appearance, &c.d_step, &c.steps};
  for (std::size_t* f : fields) *f = get_le<std::uint32_t>(bytes, pos);
  c.patch_mode = mode_from_code(get_le<std::uint32_t>(bytes, pos));
  c.ffn_mult = get_le<std::uint32_t>(bytes, pos);
  c.local_patch_h = get_le<std::uint32_t>(bytes, pos);
  c.local_patch_w = get_le<std::uint32_t>(bytes, pos);
  const auto count = get_le<std::uint64_t>(bytes, pos);

  DenoiserParams params(c);
  if (count != params.parameter_count()) {
    throw IoError("checkpoint parameter count does not match its header");
  }
  if (bytes.size() - pos != count * 8) throw IoError("checkpoint payload size mismatch");
  for (double& v : params.values()) v = std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos));
  if (!params.all_finite()) throw IoError("checkpoint contains non-finite parameters");
  return params;
}

}  // namespace hoi
