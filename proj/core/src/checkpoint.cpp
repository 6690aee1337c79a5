#include "rmkd/checkpoint.hpp"

#include "rmkd/binary_io.hpp"
#include "rmkd/error.hpp"

namespace rmkd {

std::string Checkpoint::stage() const { return get("stage"); }

std::string Checkpoint::get(const std::string& key, const std::string& fallback) const {
  auto it = metadata.find(key);
  return it == metadata.end() ? fallback : it->second;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint, DType dtype) {
  ByteWriter w;
  w.raw("RMKD1");
  w.u32(kCheckpointVersion);
  const ParameterStore& params = checkpoint.params;
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = params.tensor(i);
    w.str(params.name(i));
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.u8(static_cast<std::uint8_t>(dtype));
    for (double v : t.data()) {
      if (dtype == DType::kF32) {
        w.f32(static_cast<float>(v));
      } else {
        w.f64(v);
      }
    }
  }
  std::map<std::string, std::string> meta = checkpoint.metadata;
  for (auto& [k, v] : checkpoint.config.to_metadata()) meta[k] = v;
  std::string lines;
  for (const auto& [k, v] : meta) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos || v.find('\n') != std::string::npos) {
      throw InputError("metadata entry cannot contain '=' in its key or newlines: " + k);
    }
    lines += k + "=" + v + "\n";
  }
  w.str(lines);
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("RMKD1");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) r.fail("implausible rank " + std::to_string(rank) + " for " + name);
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) r.fail("zero dimension in " + name);
      numel *= d;
    }
    const std::uint8_t dtype = r.u8();
    if (dtype > 1) r.fail("unknown dtype " + std::to_string(dtype));
    const std::size_t width = dtype == 0 ? 4 : 8;
    if (r.remaining() / width < numel) r.fail("truncated data for " + name);
    std::vector<double> data(numel);
    for (double& v : data) v = dtype == 0 ? static_cast<double>(r.f32()) : r.f64();
    try {
      ckpt.params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
    } catch (const ContractError& e) {
      r.fail(e.what());
    }
  }
  const std::string lines = r.str();
  r.expect_end();
  std::size_t pos = 0;
  while (pos < lines.size()) {
    const std::size_t end = lines.find('\n', pos);
    const std::string line = lines.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    pos = end == std::string::npos ? lines.size() : end + 1;
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("metadata line without '=': " + line, bytes.size());
    ckpt.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  try {
    ckpt.config = ModelConfig::from_metadata(ckpt.metadata);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("bad model config: ") + e.what(), bytes.size());
  }
  const auto layout = parameter_layout(ckpt.config);
  if (layout.size() != ckpt.params.size()) {
    throw FormatError("parameter set does not match the model config", bytes.size());
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].first != ckpt.params.name(i) || layout[i].second != ckpt.params.tensor(i).shape()) {
      throw FormatError("parameter " + ckpt.params.name(i) + " does not match the model config", bytes.size());
    }
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint, DType dtype) {
  write_file(path, encode_checkpoint(checkpoint, dtype));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace rmkd
