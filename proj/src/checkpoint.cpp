#include "cyclefed/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace cyclefed::nn {

namespace {

constexpr char kMagic[8] = {'C', 'Y', 'F', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoints are written in native little-endian order");

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::ifstream& in, const std::filesystem::path& p) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw CheckpointError("truncated checkpoint " + p.string());
  return v;
}

template <class Real>
ModelState<Real> read_params(std::ifstream& in, const std::filesystem::path& p,
                             ModelSpec spec, std::uint64_t count) {
  ModelState<Real> m{std::move(spec), std::vector<Real>(count)};
  if (!in.read(reinterpret_cast<char*>(m.params.data()),
               static_cast<std::streamsize>(count * sizeof(Real))))
    throw CheckpointError("truncated parameters in " + p.string());
  return m;
}

}  // namespace

template <class Real>
void save_checkpoint(const std::filesystem::path& path,
                     const ModelState<Real>& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, sizeof(Real));
  put<std::uint64_t>(out, model.params.size());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.spec.arch.size()));
  out.write(model.spec.arch.data(), static_cast<std::streamsize>(model.spec.arch.size()));
  out.write(reinterpret_cast<const char*>(model.params.data()),
            static_cast<std::streamsize>(model.params.size() * sizeof(Real)));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

AnyModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw CheckpointError("not a checkpoint: " + path.string());
  if (get<std::uint32_t>(in, path) != kVersion)
    throw CheckpointError("unsupported checkpoint version in " + path.string());
  const auto width = get<std::uint32_t>(in, path);
  const auto count = get<std::uint64_t>(in, path);
  const auto id_len = get<std::uint32_t>(in, path);
  if (id_len > 256) throw CheckpointError("corrupt architecture id in " + path.string());
  std::string arch(id_len, '\0');
  if (!in.read(arch.data(), id_len))
    throw CheckpointError("truncated checkpoint " + path.string());
  ModelSpec spec;
  try {
    spec = make_spec(arch);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(e.what());
  }
  if (spec.param_count() != count)
    throw CheckpointError("parameter count does not match architecture " + arch);
  if (width == 4) return read_params<float>(in, path, std::move(spec), count);
  if (width == 8) return read_params<double>(in, path, std::move(spec), count);
  throw CheckpointError("unknown precision tag in " + path.string());
}

template <class Real>
ModelState<Real> load_checkpoint_as(const std::filesystem::path& path) {
  return std::visit(
      [](auto&& m) {
        ModelState<Real> out{m.spec, {}};
        out.params.assign(m.params.begin(), m.params.end());
        return out;
      },
      load_checkpoint(path));
}

template void save_checkpoint<float>(const std::filesystem::path&,
                                     const ModelState<float>&);
template void save_checkpoint<double>(const std::filesystem::path&,
                                      const ModelState<double>&);
template ModelState<float> load_checkpoint_as<float>(const std::filesystem::path&);
template ModelState<double> load_checkpoint_as<double>(const std::filesystem::path&);

}  // namespace cyclefed::nn
