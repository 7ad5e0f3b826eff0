#include "sparsepert/serialize.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace sparsepert::serialize {

static_assert(std::endian::native == std::endian::little, "payloads are stored little-endian");

using nlohmann::json;

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest failed");
  std::string out;
  for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", digest[i]);
  return out;
}

namespace {

constexpr std::array<char, 8> kMagic{'S', 'P', 'P', 'E', 'R', 'T', '\0', '\1'};

struct Container {
  std::string kind;
  json meta = json::object();
  std::vector<std::pair<std::string, Matrix>> blocks;

  const Matrix& block(const std::string& name) const {
    for (const auto& [n, m] : blocks)
      if (n == name) return m;
    throw CorruptFileError("missing block '" + name + "' in " + kind + " file");
  }
};

void write_container(const Container& c, const std::filesystem::path& path) {
  std::string payload;
  json shapes = json::array();
  for (const auto& [name, m] : c.blocks) {
    shapes.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    payload.append(reinterpret_cast<const char*>(m.data()),
                   static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  const json header = {{"kind", c.kind},
                       {"meta", c.meta},
                       {"blocks", shapes},
                       {"payload_bytes", payload.size()},
                       {"payload_sha256", sha256_hex(payload)}};
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const std::uint32_t version = kFormatVersion;
  const std::uint64_t header_len = text.size();
  out.write(kMagic.data(), kMagic.size());
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw Error("write failed for " + path.string());
}

Container read_container(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  const std::string where = " (" + path.string() + ")";

  const std::size_t fixed = kMagic.size() + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < fixed || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0)
    throw CorruptFileError("not a sparsepert file" + where);
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  std::memcpy(&version, bytes.data() + kMagic.size(), sizeof version);
  std::memcpy(&header_len, bytes.data() + kMagic.size() + sizeof version, sizeof header_len);
  if (version != kFormatVersion)
    throw VersionMismatchError(fmt::format("file format version {} but this build reads {}{}",
                                           version, kFormatVersion, where));
  if (header_len > bytes.size() - fixed) throw CorruptFileError("truncated header" + where);

  json header;
  try {
    header = json::parse(bytes.substr(fixed, header_len));
  } catch (const json::exception& e) {
    throw CorruptFileError(std::string("unreadable header: ") + e.what() + where);
  }
  const std::string payload = bytes.substr(fixed + header_len);
  Container c;
  try {
    c.kind = header.at("kind").get<std::string>();
    if (c.kind != expected_kind)
      throw CorruptFileError("expected a " + expected_kind + " file, found " + c.kind + where);
    if (header.at("payload_bytes").get<std::size_t>() != payload.size())
      throw CorruptFileError("payload length mismatch" + where);
    if (header.at("payload_sha256").get<std::string>() != sha256_hex(payload))
      throw CorruptFileError("payload checksum mismatch" + where);
    c.meta = header.at("meta");
    std::size_t pos = 0;
    for (const auto& b : header.at("blocks")) {
      const auto rows = b.at("rows").get<Eigen::Index>();
      const auto cols = b.at("cols").get<Eigen::Index>();
      if (rows < 0 || cols < 0) throw CorruptFileError("negative block shape" + where);
      Matrix m(rows, cols);
      const std::size_t n = static_cast<std::size_t>(m.size()) * sizeof(double);
      if (pos + n > payload.size()) throw CorruptFileError("block overruns payload" + where);
      std::memcpy(m.data(), payload.data() + pos, n);
      pos += n;
      c.blocks.emplace_back(b.at("name").get<std::string>(), std::move(m));
    }
    if (pos != payload.size()) throw CorruptFileError("trailing payload bytes" + where);
  } catch (const json::exception& e) {
    throw CorruptFileError(std::string("malformed header: ") + e.what() + where);
  }
  return c;
}

Matrix row_of(const std::vector<int>& v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
  return m;
}

std::vector<int> ints_of(const Matrix& m) {
  std::vector<int> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) v[static_cast<std::size_t>(i)] = static_cast<int>(m.data()[i]);
  return v;
}

json mask_to_json(const GuessMask& mask) {
  return {{"dim", mask.dim}, {"masks", mask.masks}, {"group_of", mask.group_of}};
}

GuessMask mask_from_json(const json& j) {
  GuessMask mask;
  mask.dim = j.at("dim").get<int>();
  mask.masks = j.at("masks").get<std::vector<IndexSet>>();
  mask.group_of = j.at("group_of").get<std::vector<int>>();
  return mask;
}

template <typename F>
auto rethrow_as_corrupt(const std::filesystem::path& path, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw CorruptFileError(std::string("malformed metadata: ") + e.what() + " (" + path.string() + ")");
  }
}

}  // namespace

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  data.observations.validate();
  Container c;
  c.kind = "dataset";
  c.meta = {{"mode", to_string(data.mode)},
            {"seed", data.seed},
            {"num_perturbations", data.observations.num_perturbations}};
  c.blocks = {{"base", data.observations.base},
              {"perturbed", data.observations.perturbed},
              {"base_index", row_of(data.observations.base_index)},
              {"pert_index", row_of(data.observations.pert_index)},
              {"z", data.truth.z},
              {"z_perturbed", data.truth.z_perturbed}};
  write_container(c, path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  const Container c = read_container(path, "dataset");
  Dataset data = rethrow_as_corrupt(path, [&] {
    Dataset d;
    d.mode = pair_mode_from_string(c.meta.at("mode").get<std::string>());
    d.seed = c.meta.at("seed").get<std::uint64_t>();
    d.observations.num_perturbations = c.meta.at("num_perturbations").get<int>();
    return d;
  });
  data.observations.base = c.block("base");
  data.observations.perturbed = c.block("perturbed");
  data.observations.base_index = ints_of(c.block("base_index"));
  data.observations.pert_index = ints_of(c.block("pert_index"));
  data.truth.z = c.block("z");
  data.truth.z_perturbed = c.block("z_perturbed");
  try {
    data.observations.validate();
  } catch (const Error& e) {
    throw CorruptFileError(std::string("inconsistent dataset: ") + e.what());
  }
  return data;
}

void save_model(const EncoderModel& model, const std::filesystem::path& path) {
  Container c;
  c.kind = "encoder";
  c.meta = {{"input_dim", model.input_dim()},
            {"latent_dim", model.latent_dim()},
            {"hidden", model.hidden()},
            {"alpha", model.alpha()},
            {"mask", mask_to_json(model.mask())}};
  c.blocks = {{"parameters", Matrix(model.parameters().transpose())}};
  write_container(c, path);
}

EncoderModel load_model(const std::filesystem::path& path) {
  const Container c = read_container(path, "encoder");
  EncoderModel model = rethrow_as_corrupt(path, [&] {
    return EncoderModel(c.meta.at("input_dim").get<int>(), c.meta.at("latent_dim").get<int>(),
                        mask_from_json(c.meta.at("mask")), c.meta.at("hidden").get<int>(),
                        c.meta.at("alpha").get<double>());
  });
  const Matrix& p = c.block("parameters");
  if (p.size() != model.parameter_count())
    throw CorruptFileError("parameter count does not match the architecture (" + path.string() + ")");
  model.parameters() = Eigen::Map<const Vector>(p.data(), p.size());
  return model;
}

void save_mixing(const MixingFunction& g, const std::filesystem::path& path) {
  g.validate();
  Container c;
  c.kind = "mixing";
  c.meta = {{"dim", g.dim}, {"alpha", g.alpha}};
  c.blocks = {{"w0", g.weights[0]},
              {"w1", g.weights[1]},
              {"b0", Matrix(g.biases[0].transpose())},
              {"b1", Matrix(g.biases[1].transpose())}};
  write_container(c, path);
}

MixingFunction load_mixing(const std::filesystem::path& path) {
  const Container c = read_container(path, "mixing");
  MixingFunction g = rethrow_as_corrupt(path, [&] {
    MixingFunction m;
    m.dim = c.meta.at("dim").get<int>();
    m.alpha = c.meta.at("alpha").get<double>();
    return m;
  });
  g.weights[0] = c.block("w0");
  g.weights[1] = c.block("w1");
  g.biases[0] = c.block("b0").transpose();
  g.biases[1] = c.block("b1").transpose();
  try {
    g.validate();
  } catch (const Error& e) {
    throw CorruptFileError(std::string("inconsistent mixing function: ") + e.what());
  }
  return g;
}

void save_perturbations(const PerturbationSet& set, const std::filesystem::path& path) {
  set.validate();
  Container c;
  c.kind = "perturbations";
  c.meta = {{"dim", set.dim},
            {"group_of", set.group_of},
            {"block_of_group", set.block_of_group},
            {"non_overlapping", set.non_overlapping}};
  c.blocks = {{"vectors", set.vectors}};
  write_container(c, path);
}

PerturbationSet load_perturbations(const std::filesystem::path& path) {
  const Container c = read_container(path, "perturbations");
  PerturbationSet set = rethrow_as_corrupt(path, [&] {
    PerturbationSet s;
    s.dim = c.meta.at("dim").get<int>();
    s.group_of = c.meta.at("group_of").get<std::vector<int>>();
    s.block_of_group = c.meta.at("block_of_group").get<std::vector<IndexSet>>();
    s.non_overlapping = c.meta.at("non_overlapping").get<bool>();
    return s;
  });
  set.vectors = c.block("vectors");
  try {
    set.validate();
  } catch (const Error& e) {
    throw CorruptFileError(std::string("inconsistent perturbation set: ") + e.what());
  }
  return set;
}

}  // namespace sparsepert::serialize
