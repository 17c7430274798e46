#include "efsign/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "efsign/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace efsign {

NamedArray NamedArray::from(std::string name, const Tensor& t) {
  NamedArray a;
  a.name = std::move(name);
  a.dtype = "f32";
  a.shape = t.shape();
  a.f32.assign(t.data().begin(), t.data().end());
  return a;
}

NamedArray NamedArray::from(std::string name, Shape shape, std::vector<double> values) {
  NamedArray a;
  a.name = std::move(name);
  a.dtype = "f64";
  a.shape = std::move(shape);
  if (values.size() != shape_numel(a.shape)) throw ConfigError("array '" + a.name + "' length does not match shape");
  a.f64 = std::move(values);
  return a;
}

const NamedArray& Container::array(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw IncompatibleError("checkpoint has no array named '" + name + "'");
}

bool Container::has(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

namespace {

template <typename U>
void put_le(std::string& out, U value) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get_le(const unsigned char* p) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

std::uint32_t crc32_of(const unsigned char* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::size_t dtype_size(const std::string& dtype, const std::string& name) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw FormatError("array '" + name + "' has unsupported dtype '" + dtype + "'");
}

}  // namespace

void write_container(const fs::path& path, const Container& container) {
  json header = container.header;
  header["arrays"] = json::array();
  std::string payload;
  for (const auto& a : container.arrays) {
    const std::size_t n = a.numel();
    if (a.dtype == "f32") {
      if (a.f32.size() != n) throw ConfigError("array '" + a.name + "' length does not match shape");
      for (float v : a.f32) put_le(payload, v);
    } else if (a.dtype == "f64") {
      if (a.f64.size() != n) throw ConfigError("array '" + a.name + "' length does not match shape");
      for (double v : a.f64) put_le(payload, v);
    } else {
      throw ConfigError("array '" + a.name + "' has unsupported dtype '" + a.dtype + "'");
    }
    header["arrays"].push_back({{"name", a.name}, {"dtype", a.dtype}, {"shape", a.shape}});
  }
  const std::string header_text = header.dump();
  std::string out = "EFSN";
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  out += payload;
  put_le<std::uint32_t>(out, crc32_of(reinterpret_cast<const unsigned char*>(payload.data()), payload.size()));

  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot open " + path.string() + " for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("failed writing " + path.string());
}

Container read_container(const fs::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open " + path.string());
  const std::string raw((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
  const std::string where = path.string();

  if (raw.size() < 4 || raw.compare(0, 4, "EFSN") != 0) throw FormatError(where + ": not an EFSN container (bad magic)");
  if (raw.size() < 16) throw CorruptionError(where + ": truncated preamble");
  const auto version = get_le<std::uint32_t>(bytes + 4);
  if (version != kCheckpointVersion) {
    throw FormatError(where + ": unsupported container version " + std::to_string(version));
  }
  const auto header_len = get_le<std::uint64_t>(bytes + 8);
  if (header_len > raw.size() - 16) throw CorruptionError(where + ": truncated header");

  Container c;
  try {
    c.header = json::parse(raw.begin() + 16, raw.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw CorruptionError(where + ": unreadable header: " + e.what());
  }
  if (!c.header.is_object() || !c.header.contains("arrays") || !c.header["arrays"].is_array()) {
    throw FormatError(where + ": header lacks an array manifest");
  }

  std::size_t payload_len = 0;
  for (const auto& entry : c.header["arrays"]) {
    NamedArray a;
    try {
      a.name = entry.at("name").get<std::string>();
      a.dtype = entry.at("dtype").get<std::string>();
      a.shape = entry.at("shape").get<Shape>();
    } catch (const json::exception& e) {
      throw FormatError(where + ": malformed manifest entry: " + e.what());
    }
    payload_len += a.numel() * dtype_size(a.dtype, a.name);
    c.arrays.push_back(std::move(a));
  }
  const std::size_t payload_start = 16 + header_len;
  if (raw.size() != payload_start + payload_len + 4) {
    throw CorruptionError(where + ": payload is " +
                          std::to_string(raw.size() >= payload_start + 4 ? raw.size() - payload_start - 4 : 0) +
                          " bytes, manifest requires " + std::to_string(payload_len));
  }
  const std::uint32_t stored = get_le<std::uint32_t>(bytes + payload_start + payload_len);
  if (stored != crc32_of(bytes + payload_start, payload_len)) throw CorruptionError(where + ": payload CRC mismatch");

  const unsigned char* p = bytes + payload_start;
  for (auto& a : c.arrays) {
    const std::size_t n = a.numel();
    if (a.dtype == "f32") {
      a.f32.resize(n);
      for (std::size_t i = 0; i < n; ++i, p += 4) a.f32[i] = get_le<float>(p);
    } else {
      a.f64.resize(n);
      for (std::size_t i = 0; i < n; ++i, p += 8) a.f64[i] = get_le<double>(p);
    }
  }
  return c;
}

json spec_to_json(const ModelSpec& spec) {
  json stages = json::array();
  for (const auto& s : spec.backbone.stages) {
    stages.push_back({{"expansion", s.expansion},
                      {"out_channels", s.out_channels},
                      {"repeats", s.repeats},
                      {"stride", s.stride},
                      {"kernel", s.kernel},
                      {"internal_se_ratio", s.internal_se_ratio}});
  }
  return {{"kind", model_kind_name(spec.kind)},
          {"backbone",
           {{"preset", spec.backbone.preset},
            {"stem_channels", spec.backbone.stem_channels},
            {"stages", stages},
            {"head_channels", spec.backbone.head_channels},
            {"input_size", spec.backbone.input_size}}},
          {"se_reduction", spec.se_reduction},
          {"spatial_kernel", spec.spatial_kernel},
          {"dropout_p", spec.dropout_p},
          {"num_classes", spec.num_classes},
          {"bn_momentum", spec.bn_momentum},
          {"bn_epsilon", spec.bn_epsilon}};
}

ModelSpec spec_from_json(const json& j) {
  try {
    ModelSpec spec;
    spec.kind = parse_model_kind(j.at("kind").get<std::string>());
    const auto& b = j.at("backbone");
    spec.backbone.preset = b.at("preset").get<std::string>();
    spec.backbone.stem_channels = b.at("stem_channels").get<std::size_t>();
    spec.backbone.head_channels = b.at("head_channels").get<std::size_t>();
    spec.backbone.input_size = b.at("input_size").get<std::size_t>();
    spec.backbone.stages.clear();
    for (const auto& s : b.at("stages")) {
      spec.backbone.stages.push_back({s.at("expansion").get<std::size_t>(), s.at("out_channels").get<std::size_t>(),
                                      s.at("repeats").get<std::size_t>(), s.at("stride").get<std::size_t>(),
                                      s.at("kernel").get<std::size_t>(), s.at("internal_se_ratio").get<double>()});
    }
    spec.se_reduction = j.at("se_reduction").get<std::size_t>();
    spec.spatial_kernel = j.at("spatial_kernel").get<std::size_t>();
    spec.dropout_p = j.at("dropout_p").get<double>();
    spec.num_classes = j.at("num_classes").get<std::size_t>();
    spec.bn_momentum = j.at("bn_momentum").get<double>();
    spec.bn_epsilon = j.at("bn_epsilon").get<double>();
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed model spec: ") + e.what());
  }
}

void save_checkpoint(const ModelState& model, const fs::path& path, const json& extra) {
  Container c;
  c.header["kind"] = "model";
  c.header["spec"] = spec_to_json(model.spec);
  c.header["training"] = extra;
  for (const auto& p : model.parameters) c.arrays.push_back(NamedArray::from(p.name, p.value));
  for (const auto& bn : model.batch_norms) {
    const std::size_t C = bn.stats.running_mean.size();
    c.arrays.push_back(NamedArray::from(bn.name + ".running_mean", Tensor({C}, bn.stats.running_mean)));
    c.arrays.push_back(NamedArray::from(bn.name + ".running_var", Tensor({C}, bn.stats.running_var)));
  }
  write_container(path, c);
}

namespace {

void require_kind(const Container& c, const std::string& kind, const fs::path& path) {
  const std::string stored = c.header.value("kind", std::string("?"));
  if (stored != kind) {
    throw IncompatibleError(path.string() + " holds a '" + stored + "' container, expected '" + kind + "'");
  }
}

const NamedArray& expect_array(const Container& c, const std::string& name, const Shape& shape,
                               const std::string& dtype) {
  if (!c.has(name)) throw IncompatibleError("checkpoint array '" + name + "' is missing");
  const NamedArray& a = c.array(name);
  if (a.shape != shape || a.dtype != dtype) {
    throw IncompatibleError("checkpoint array '" + name + "' is " + a.dtype + shape_str(a.shape) + ", expected " +
                            dtype + shape_str(shape));
  }
  return a;
}

}  // namespace

ModelState load_checkpoint(const fs::path& path, std::optional<ModelKind> expected_kind) {
  const Container c = read_container(path);
  require_kind(c, "model", path);
  if (!c.header.contains("spec")) throw FormatError(path.string() + ": checkpoint header has no model spec");
  const ModelSpec spec = spec_from_json(c.header["spec"]);
  if (expected_kind && *expected_kind != spec.kind) {
    throw IncompatibleError(path.string() + " holds a " + model_kind_name(spec.kind) + " model, expected " +
                            model_kind_name(*expected_kind));
  }
  ModelState model = build_model(spec, 0);
  std::size_t expected_arrays = model.parameters.size() + 2 * model.batch_norms.size();
  for (auto& p : model.parameters) {
    const auto& a = expect_array(c, p.name, p.value.shape(), "f32");
    std::copy(a.f32.begin(), a.f32.end(), p.value.data().begin());
  }
  for (auto& bn : model.batch_norms) {
    const Shape s{bn.stats.running_mean.size()};
    bn.stats.running_mean = expect_array(c, bn.name + ".running_mean", s, "f32").f32;
    bn.stats.running_var = expect_array(c, bn.name + ".running_var", s, "f32").f32;
  }
  if (c.arrays.size() != expected_arrays) {
    for (const auto& a : c.arrays) {
      const bool known = [&] {
        for (const auto& p : model.parameters) {
          if (p.name == a.name) return true;
        }
        for (const auto& bn : model.batch_norms) {
          if (a.name == bn.name + ".running_mean" || a.name == bn.name + ".running_var") return true;
        }
        return false;
      }();
      if (!known) throw IncompatibleError("checkpoint array '" + a.name + "' is not part of the model");
    }
    throw IncompatibleError("checkpoint has duplicate arrays");
  }
  return model;
}

namespace {

NamedArray matrix_array(const std::string& name, const Matrix& m) {
  return NamedArray::from(name, {m.rows, m.cols}, m.data);
}

Matrix matrix_from(const NamedArray& a) {
  if (a.dtype != "f64" || a.shape.size() != 2) throw IncompatibleError("array '" + a.name + "' is not an f64 matrix");
  Matrix m(a.shape[0], a.shape[1]);
  m.data = a.f64;
  return m;
}

std::vector<double> labels_to_f64(std::span<const int> labels) { return {labels.begin(), labels.end()}; }

std::vector<int> labels_from(const NamedArray& a) {
  std::vector<int> out;
  for (double v : a.f64) out.push_back(static_cast<int>(v));
  return out;
}

}  // namespace

void save_svm(const SvmModel& model, const fs::path& path) {
  Container c;
  c.header["kind"] = "svm";
  c.header["C"] = model.C;
  c.header["gamma"] = model.gamma;
  c.header["num_classes"] = model.num_classes;
  c.header["dim"] = model.dim;
  c.header["one_vs_rest"] = model.one_vs_rest;
  json machines = json::array();
  for (std::size_t i = 0; i < model.machines.size(); ++i) {
    const auto& m = model.machines[i];
    machines.push_back({{"positive", m.positive},
                        {"negative", m.negative},
                        {"bias", m.bias},
                        {"support", m.coef.size()},
                        {"dual_objective", m.dual_objective},
                        {"iterations", m.iterations},
                        {"converged", m.converged}});
    if (m.coef.empty()) continue;
    const std::string prefix = "machine." + std::to_string(i);
    c.arrays.push_back(matrix_array(prefix + ".support_vectors", m.support_vectors));
    c.arrays.push_back(NamedArray::from(prefix + ".dual_coef", {m.coef.size()}, m.coef));
  }
  c.header["machines"] = machines;
  write_container(path, c);
}

SvmModel load_svm(const fs::path& path) {
  const Container c = read_container(path);
  require_kind(c, "svm", path);
  try {
    SvmModel model;
    model.C = c.header.at("C").get<double>();
    model.gamma = c.header.at("gamma").get<double>();
    model.num_classes = c.header.at("num_classes").get<std::size_t>();
    model.dim = c.header.at("dim").get<std::size_t>();
    model.one_vs_rest = c.header.at("one_vs_rest").get<bool>();
    const auto& machines = c.header.at("machines");
    for (std::size_t i = 0; i < machines.size(); ++i) {
      const auto& j = machines[i];
      BinarySvm m;
      m.positive = j.at("positive").get<int>();
      m.negative = j.at("negative").get<int>();
      m.bias = j.at("bias").get<double>();
      m.dual_objective = j.at("dual_objective").get<double>();
      m.iterations = j.at("iterations").get<std::size_t>();
      m.converged = j.at("converged").get<bool>();
      const auto count = j.at("support").get<std::size_t>();
      m.support_vectors = Matrix(0, model.dim);
      if (count > 0) {
        const std::string prefix = "machine." + std::to_string(i);
        m.support_vectors = matrix_from(expect_array(c, prefix + ".support_vectors", {count, model.dim}, "f64"));
        m.coef = expect_array(c, prefix + ".dual_coef", {count}, "f64").f64;
      }
      model.machines.push_back(std::move(m));
    }
    return model;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed svm header: " + e.what());
  }
}

void save_knn(const KnnModel& model, const fs::path& path) {
  Container c;
  c.header["kind"] = "knn";
  c.header["k"] = model.k;
  c.header["num_classes"] = model.num_classes;
  c.arrays.push_back(matrix_array("features", model.features));
  c.arrays.push_back(NamedArray::from("labels", {model.labels.size()}, labels_to_f64(model.labels)));
  write_container(path, c);
}

KnnModel load_knn(const fs::path& path) {
  const Container c = read_container(path);
  require_kind(c, "knn", path);
  KnnModel m;
  m.features = matrix_from(c.array("features"));
  m.labels = labels_from(expect_array(c, "labels", {m.features.rows}, "f64"));
  m.k = c.header.value("k", std::size_t{5});
  m.num_classes = c.header.value("num_classes", std::size_t{0});
  return m;
}

void save_logreg(const LogRegModel& model, const fs::path& path) {
  Container c;
  c.header["kind"] = "logreg";
  c.header["C"] = model.C;
  c.header["iterations"] = model.iterations;
  c.header["objective"] = model.objective;
  c.header["grad_norm"] = model.grad_norm;
  c.header["converged"] = model.converged;
  c.arrays.push_back(matrix_array("weights", model.weights));
  c.arrays.push_back(NamedArray::from("bias", {model.bias.size()}, model.bias));
  write_container(path, c);
}

LogRegModel load_logreg(const fs::path& path) {
  const Container c = read_container(path);
  require_kind(c, "logreg", path);
  LogRegModel m;
  m.weights = matrix_from(c.array("weights"));
  m.bias = expect_array(c, "bias", {m.weights.rows}, "f64").f64;
  m.C = c.header.value("C", 1.0);
  m.iterations = c.header.value("iterations", std::size_t{0});
  m.objective = c.header.value("objective", 0.0);
  m.grad_norm = c.header.value("grad_norm", 0.0);
  m.converged = c.header.value("converged", false);
  return m;
}

void save_features(const FeatureSet& set, const fs::path& path) {
  if (set.labels.size() != set.features.rows) throw ConfigError("feature set: label count does not match rows");
  Container c;
  c.header["kind"] = "features";
  c.header["class_names"] = set.class_names;
  c.arrays.push_back(matrix_array("features", set.features));
  c.arrays.push_back(NamedArray::from("labels", {set.labels.size()}, labels_to_f64(set.labels)));
  write_container(path, c);
}

FeatureSet load_features(const fs::path& path) {
  const Container c = read_container(path);
  require_kind(c, "features", path);
  FeatureSet set;
  set.features = matrix_from(c.array("features"));
  set.labels = labels_from(expect_array(c, "labels", {set.features.rows}, "f64"));
  set.class_names = c.header.value("class_names", std::vector<std::string>{});
  return set;
}

}  // namespace efsign
