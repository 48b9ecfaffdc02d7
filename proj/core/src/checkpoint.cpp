#include "smlm/checkpoint.hpp"

#include "smlm/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace smlm {

namespace {

constexpr char kMagic[8] = {'S', 'M', 'L', 'M', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian hosts");

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& source) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw ParseError(source + ": truncated checkpoint");
  return value;
}

std::filesystem::path sidecar(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

}  // namespace

void atomic_write(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("failed to write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const nn::ParamList& params, const nlohmann::json& metadata) {
  std::string blob(kMagic, sizeof(kMagic));
  put<std::uint32_t>(blob, kCheckpointVersion);
  put<std::uint32_t>(blob, static_cast<std::uint32_t>(params.items().size()));
  for (const auto& p : params.items()) {
    put<std::uint32_t>(blob, static_cast<std::uint32_t>(p.name.size()));
    blob.append(p.name);
    const auto& m = p.var.value();
    put<std::uint64_t>(blob, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(blob, static_cast<std::uint64_t>(m.cols()));
    blob.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  atomic_write(path, blob);
  nlohmann::json meta = metadata;
  meta["format_version"] = kCheckpointVersion;
  meta["parameter_count"] = params.scalar_count();
  atomic_write(sidecar(path), meta.dump(2) + "\n");
}

nlohmann::json load_checkpoint(const std::filesystem::path& path, nn::ParamList& params) {
  std::ifstream in(path, std::ios::binary);
  const std::string source = path.string();
  if (!in) throw ParseError("cannot open checkpoint " + source);
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ParseError(source + ": not a checkpoint file");
  }
  const auto version = get<std::uint32_t>(in, source);
  if (version != kCheckpointVersion) {
    throw ParseError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = get<std::uint32_t>(in, source);
  if (count != params.items().size()) throw ParseError(source + ": parameter count mismatch");
  for (const auto& p : params.items()) {
    const auto name_len = get<std::uint32_t>(in, source);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw ParseError(source + ": truncated checkpoint");
    if (name != p.name) throw ParseError(source + ": expected parameter " + p.name + ", found " + name);
    const auto rows = get<std::uint64_t>(in, source);
    const auto cols = get<std::uint64_t>(in, source);
    ad::Matrix& m = p.var.node()->value;
    if (rows != static_cast<std::uint64_t>(m.rows()) || cols != static_cast<std::uint64_t>(m.cols())) {
      throw ParseError(source + ": shape mismatch for " + name);
    }
    if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)))) {
      throw ParseError(source + ": truncated checkpoint");
    }
  }
  return read_checkpoint_metadata(path);
}

nlohmann::json read_checkpoint_metadata(const std::filesystem::path& path) {
  std::ifstream in(sidecar(path));
  if (!in) throw ParseError("missing checkpoint metadata " + sidecar(path).string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(sidecar(path).string() + ": " + e.what());
  }
}

}  // namespace smlm
