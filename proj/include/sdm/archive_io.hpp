#pragma once

#include <array>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "sdm/estimator.hpp"

namespace sdm {

// ---------------------------------------------------------------------------
// Length-prefixed little-endian block files. Each file is a sequence of
// named sections; numeric payloads are raw 64-bit little-endian words.
// ---------------------------------------------------------------------------

namespace blockio {

enum class Kind : std::uint8_t { kF64 = 0, kU64 = 1, kStr = 2 };

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  put_u64(out, bits);
}

class Writer {
 public:
  void f64(const std::string& name, const Vec& values) {
    header(name, Kind::kF64, values.size());
    for (const double v : values) put_f64(buffer_, v);
  }
  void f64(const std::string& name, double value) { f64(name, Vec{value}); }
  void u64(const std::string& name, const std::vector<std::uint64_t>& values) {
    header(name, Kind::kU64, values.size());
    for (const std::uint64_t v : values) put_u64(buffer_, v);
  }
  void u64(const std::string& name, std::uint64_t value) {
    u64(name, std::vector<std::uint64_t>{value});
  }
  void str(const std::string& name, const std::vector<std::string>& values) {
    header(name, Kind::kStr, values.size());
    for (const std::string& s : values) {
      put_u32(buffer_, static_cast<std::uint32_t>(s.size()));
      buffer_.append(s);
    }
  }
  const std::string& bytes() const { return buffer_; }

 private:
  void header(const std::string& name, Kind kind, std::size_t count) {
    put_u32(buffer_, static_cast<std::uint32_t>(name.size()));
    buffer_.append(name);
    buffer_.push_back(static_cast<char>(kind));
    put_u64(buffer_, count);
  }
  std::string buffer_;
};

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) { parse(); }

  const Vec& f64(const std::string& name) const { return find(f64_, name); }
  double f64_scalar(const std::string& name) const {
    const Vec& values = f64(name);
    if (values.size() != 1) throw Error("archive section '" + name + "' is not a scalar");
    return values[0];
  }
  const std::vector<std::uint64_t>& u64(const std::string& name) const {
    return find(u64_, name);
  }
  std::uint64_t u64_scalar(const std::string& name) const {
    const auto& values = u64(name);
    if (values.size() != 1) throw Error("archive section '" + name + "' is not a scalar");
    return values[0];
  }
  const std::vector<std::string>& str(const std::string& name) const { return find(str_, name); }

 private:
  template <typename MapT>
  const typename MapT::mapped_type& find(const MapT& map, const std::string& name) const {
    const auto it = map.find(name);
    if (it == map.end()) throw Error("archive section missing: " + name);
    return it->second;
  }

  std::uint32_t take_u32() {
    if (pos_ + 4 > bytes_.size()) throw Error("archive block truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  std::uint64_t take_u64() {
    if (pos_ + 8 > bytes_.size()) throw Error("archive block truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return v;
  }
  void parse() {
    while (pos_ < bytes_.size()) {
      const std::uint32_t name_len = take_u32();
      if (pos_ + name_len > bytes_.size()) throw Error("archive block truncated");
      const std::string name = bytes_.substr(pos_, name_len);
      pos_ += name_len;
      if (pos_ >= bytes_.size()) throw Error("archive block truncated");
      const Kind kind = static_cast<Kind>(bytes_[pos_++]);
      const std::uint64_t count = take_u64();
      switch (kind) {
        case Kind::kF64: {
          Vec values(count);
          for (std::uint64_t i = 0; i < count; ++i) {
            const std::uint64_t bits = take_u64();
            std::memcpy(&values[i], &bits, sizeof(double));
          }
          f64_[name] = std::move(values);
          break;
        }
        case Kind::kU64: {
          std::vector<std::uint64_t> values(count);
          for (std::uint64_t i = 0; i < count; ++i) values[i] = take_u64();
          u64_[name] = std::move(values);
          break;
        }
        case Kind::kStr: {
          std::vector<std::string> values(count);
          for (std::uint64_t i = 0; i < count; ++i) {
            const std::uint32_t len = take_u32();
            if (pos_ + len > bytes_.size()) throw Error("archive block truncated");
            values[i] = bytes_.substr(pos_, len);
            pos_ += len;
          }
          str_[name] = std::move(values);
          break;
        }
        default:
          throw Error("archive block has unknown section kind");
      }
    }
  }

  std::string bytes_;
  std::size_t pos_ = 0;
  std::map<std::string, Vec> f64_;
  std::map<std::string, std::vector<std::uint64_t>> u64_;
  std::map<std::string, std::vector<std::string>> str_;
};

}  // namespace blockio

inline std::uint32_t crc32(const std::string& bytes) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (const char ch : bytes) {
    crc = table[(crc ^ static_cast<unsigned char>(ch)) & 0xffu] ^ (crc >> 8);
  }
  return crc ^ 0xFFFFFFFFu;
}

inline std::string crc32_hex(const std::string& bytes) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << crc32(bytes);
  return os.str();
}

namespace detail {

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open file: " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write file: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<std::uint64_t> to_u64(const std::vector<std::size_t>& values) {
  return {values.begin(), values.end()};
}

inline std::vector<std::size_t> to_size(const std::vector<std::uint64_t>& values) {
  return {values.begin(), values.end()};
}

inline void write_matrix(blockio::Writer& writer, const std::string& name, const Matrix& m) {
  writer.u64(name + ".rows", static_cast<std::uint64_t>(m.rows));
  writer.u64(name + ".cols", static_cast<std::uint64_t>(m.cols));
  writer.f64(name + ".data", m.data);
}

inline Matrix read_matrix(const blockio::Reader& reader, const std::string& name) {
  Matrix m;
  m.rows = reader.u64_scalar(name + ".rows");
  m.cols = reader.u64_scalar(name + ".cols");
  m.data = reader.f64(name + ".data");
  if (m.data.size() != m.rows * m.cols) throw Error("archive matrix shape mismatch: " + name);
  return m;
}

inline void write_cdfs(blockio::Writer& writer, const std::string& name,
                       const std::vector<EmpiricalCdf>& cdfs) {
  Vec flat;
  std::vector<std::uint64_t> offsets;
  std::vector<std::uint64_t> saturating;
  for (const auto& cdf : cdfs) {
    offsets.push_back(flat.size());
    saturating.push_back(cdf.saturating ? 1 : 0);
    flat.insert(flat.end(), cdf.values.begin(), cdf.values.end());
  }
  offsets.push_back(flat.size());
  writer.f64(name + ".values", flat);
  writer.u64(name + ".offsets", offsets);
  writer.u64(name + ".saturating", saturating);
}

inline std::vector<EmpiricalCdf> read_cdfs(const blockio::Reader& reader,
                                           const std::string& name) {
  const Vec& flat = reader.f64(name + ".values");
  const auto& offsets = reader.u64(name + ".offsets");
  const auto& saturating = reader.u64(name + ".saturating");
  if (offsets.empty() || saturating.size() + 1 != offsets.size()) {
    throw Error("archive cdf table malformed: " + name);
  }
  std::vector<EmpiricalCdf> cdfs;
  for (std::size_t c = 0; c + 1 < offsets.size(); ++c) {
    if (offsets[c + 1] < offsets[c] || offsets[c + 1] > flat.size()) {
      throw Error("archive cdf table malformed: " + name);
    }
    EmpiricalCdf cdf;
    cdf.values.assign(flat.begin() + static_cast<std::ptrdiff_t>(offsets[c]),
                      flat.begin() + static_cast<std::ptrdiff_t>(offsets[c + 1]));
    cdf.saturating = saturating[c] != 0;
    cdfs.push_back(std::move(cdf));
  }
  return cdfs;
}

// RAII write lock: one writer per archive directory.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    if (std::filesystem::exists(path_)) {
      throw Error("archive directory is locked by another writer: " + dir.string());
    }
    std::ofstream out(path_);
    if (!out) throw Error("cannot create lock file: " + path_.string());
    out << "lock\n";
  }
  ~DirectoryLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Estimator archive directory layout: one block file per component plus a
// manifest (written last, so a partial directory never validates).
// ---------------------------------------------------------------------------

inline nlohmann::json archive_config_to_json(const ArchiveConfig& config) {
  nlohmann::json obj;
  obj["class_count"] = config.class_count;
  obj["dimension"] = config.dimension;
  obj["filters"] = config.filters;
  obj["kernel_span"] = config.kernel_span;
  obj["conv_nonlinearity"] = config.conv_nonlinearity;
  obj["iterations"] = config.iterations;
  obj["max_epochs"] = config.max_epochs;
  obj["batch_size"] = config.batch_size;
  obj["adaptor_lr"] = config.adaptor_lr;
  obj["rescaler_lr"] = config.rescaler_lr;
  obj["rescaler_max_epochs"] = config.rescaler_max_epochs;
  obj["rescaler_stop_after"] = config.rescaler_stop_after;
  obj["balance_tolerance"] = config.balance_tolerance;
  obj["seed"] = config.seed;
  return obj;
}

inline ArchiveConfig archive_config_from_json(const nlohmann::json& obj) {
  ArchiveConfig config;
  config.class_count = obj.at("class_count").get<std::size_t>();
  config.dimension = obj.at("dimension").get<std::size_t>();
  config.filters = obj.at("filters").get<std::size_t>();
  config.kernel_span = obj.at("kernel_span").get<std::size_t>();
  config.conv_nonlinearity = obj.at("conv_nonlinearity").get<bool>();
  config.iterations = obj.at("iterations").get<std::size_t>();
  config.max_epochs = obj.at("max_epochs").get<std::size_t>();
  config.batch_size = obj.at("batch_size").get<std::size_t>();
  config.adaptor_lr = obj.at("adaptor_lr").get<double>();
  config.rescaler_lr = obj.at("rescaler_lr").get<double>();
  config.rescaler_max_epochs = obj.at("rescaler_max_epochs").get<std::size_t>();
  config.rescaler_stop_after = obj.at("rescaler_stop_after").get<std::size_t>();
  config.balance_tolerance = obj.at("balance_tolerance").get<std::size_t>();
  config.seed = obj.at("seed").get<std::uint64_t>();
  return config;
}

namespace detail {

inline std::string encode_adaptor(const EstimatorArchive& archive) {
  blockio::Writer w;
  write_matrix(w, "conv", archive.adaptor.weights.conv);
  write_matrix(w, "linear", archive.adaptor.weights.linear);
  w.f64("bias", archive.adaptor.weights.bias);
  w.u64("conv_nonlinearity", archive.adaptor.weights.conv_nonlinearity ? 1 : 0);
  w.f64("input_mean", archive.adaptor.input_mean);
  w.f64("input_std", archive.adaptor.input_std);
  w.str("train_ids", archive.adaptor.train_ids);
  w.str("calibration_ids", archive.adaptor.calibration_ids);
  w.f64("train_q", archive.adaptor.train_q);
  w.f64("train_d", archive.adaptor.train_d);
  w.f64("selection_metric", archive.adaptor.selection_metric);
  return w.bytes();
}

inline void decode_adaptor(const std::string& bytes, EstimatorArchive& archive) {
  blockio::Reader r(bytes);
  archive.adaptor.weights.conv = read_matrix(r, "conv");
  archive.adaptor.weights.linear = read_matrix(r, "linear");
  archive.adaptor.weights.bias = r.f64("bias");
  archive.adaptor.weights.conv_nonlinearity = r.u64_scalar("conv_nonlinearity") != 0;
  archive.adaptor.input_mean = r.f64("input_mean");
  archive.adaptor.input_std = r.f64("input_std");
  archive.adaptor.train_ids = r.str("train_ids");
  archive.adaptor.calibration_ids = r.str("calibration_ids");
  archive.adaptor.train_q = r.f64("train_q");
  archive.adaptor.train_d = r.f64("train_d");
  archive.adaptor.selection_metric = r.f64_scalar("selection_metric");
}

inline std::string encode_support(const EstimatorArchive& archive) {
  blockio::Writer w;
  write_matrix(w, "h_prime", archive.support.h_prime);
  w.u64("predicted", to_u64(archive.support.predicted));
  w.u64("label", to_u64(archive.support.label));
  w.str("ids", archive.support.ids);
  return w.bytes();
}

inline void decode_support(const std::string& bytes, EstimatorArchive& archive) {
  blockio::Reader r(bytes);
  archive.support.h_prime = read_matrix(r, "h_prime");
  archive.support.predicted = to_size(r.u64("predicted"));
  archive.support.label = to_size(r.u64("label"));
  archive.support.ids = r.str("ids");
}

inline std::string encode_tables(const EstimatorArchive& archive) {
  blockio::Writer w;
  write_cdfs(w, "distance", archive.tables.distance);
  write_cdfs(w, "sdm_output", archive.tables.sdm_output);
  write_cdfs(w, "soft_qbin", archive.tables.soft_qbin);
  w.f64("calibration_counts", archive.tables.calibration_counts);
  write_matrix(w, "rescaler", archive.tables.rescaler);
  return w.bytes();
}

inline void decode_tables(const std::string& bytes, EstimatorArchive& archive) {
  blockio::Reader r(bytes);
  archive.tables.distance = read_cdfs(r, "distance");
  archive.tables.sdm_output = read_cdfs(r, "sdm_output");
  archive.tables.soft_qbin = read_cdfs(r, "soft_qbin");
  archive.tables.calibration_counts = r.f64("calibration_counts");
  archive.tables.rescaler = read_matrix(r, "rescaler");
}

inline std::string encode_thresholds(const EstimatorArchive& archive) {
  const RegionThresholds& t = archive.thresholds;
  blockio::Writer w;
  w.u64("has_min_valid_qbin", t.min_valid_qbin_star ? 1 : 0);
  w.f64("min_valid_qbin", t.min_valid_qbin_star.value_or(0.0));
  w.u64("has_psi", t.psi ? 1 : 0);
  w.f64("psi", t.psi.value_or(Vec{}));
  w.f64("c_hat", t.c_hat);
  std::vector<std::uint64_t> offset_pred;
  Vec offset_bin;
  Vec offset_value;
  for (const auto& [pred, bins] : t.e_offset) {
    for (const auto& [bin, value] : bins) {
      offset_pred.push_back(pred);
      offset_bin.push_back(static_cast<double>(bin));
      offset_value.push_back(value);
    }
  }
  w.u64("offset_pred", offset_pred);
  w.f64("offset_bin", offset_bin);
  w.f64("offset_value", offset_value);
  std::vector<std::uint64_t> iter_has;
  Vec iter_value;
  for (const auto& v : t.iteration_min_valid_qbins) {
    iter_has.push_back(v ? 1 : 0);
    iter_value.push_back(v.value_or(0.0));
  }
  w.u64("iteration_has_qbin", iter_has);
  w.f64("iteration_qbin", iter_value);
  w.u64("excluded_iterations", t.excluded_iterations);
  return w.bytes();
}

inline void decode_thresholds(const std::string& bytes, EstimatorArchive& archive) {
  blockio::Reader r(bytes);
  RegionThresholds& t = archive.thresholds;
  if (r.u64_scalar("has_min_valid_qbin") != 0) {
    t.min_valid_qbin_star = r.f64_scalar("min_valid_qbin");
  }
  if (r.u64_scalar("has_psi") != 0) t.psi = r.f64("psi");
  t.c_hat = r.f64_scalar("c_hat");
  const auto& offset_pred = r.u64("offset_pred");
  const Vec& offset_bin = r.f64("offset_bin");
  const Vec& offset_value = r.f64("offset_value");
  if (offset_pred.size() != offset_bin.size() || offset_pred.size() != offset_value.size()) {
    throw Error("archive thresholds malformed");
  }
  for (std::size_t i = 0; i < offset_pred.size(); ++i) {
    t.e_offset[offset_pred[i]][static_cast<long>(offset_bin[i])] = offset_value[i];
  }
  const auto& iter_has = r.u64("iteration_has_qbin");
  const Vec& iter_value = r.f64("iteration_qbin");
  for (std::size_t i = 0; i < iter_has.size(); ++i) {
    t.iteration_min_valid_qbins.push_back(
        iter_has[i] != 0 ? std::optional<double>(iter_value[i]) : std::nullopt);
  }
  t.excluded_iterations = r.u64_scalar("excluded_iterations");
}

inline std::string encode_stats(const EstimatorArchive& archive) {
  blockio::Writer w;
  w.u64("iterations", archive.iteration_stats.size());
  w.u64("winning_iteration", archive.winning_iteration);
  std::vector<std::uint64_t> has_qbin, counts, label, predicted;
  Vec qbin, metric, soft_qbin, o_true, p_centroid;
  for (const auto& it : archive.iteration_stats) {
    has_qbin.push_back(it.min_valid_qbin ? 1 : 0);
    qbin.push_back(it.min_valid_qbin.value_or(0.0));
    metric.push_back(it.metric);
    counts.push_back(it.records.size());
    for (const auto& rec : it.records) {
      label.push_back(rec.label);
      predicted.push_back(rec.predicted);
      soft_qbin.push_back(rec.soft_qbin);
      o_true.push_back(rec.o_true);
      p_centroid.push_back(rec.p_centroid);
    }
  }
  w.u64("has_qbin", has_qbin);
  w.f64("qbin", qbin);
  w.f64("metric", metric);
  w.u64("record_counts", counts);
  w.u64("record_label", label);
  w.u64("record_predicted", predicted);
  w.f64("record_soft_qbin", soft_qbin);
  w.f64("record_o_true", o_true);
  w.f64("record_p_centroid", p_centroid);
  return w.bytes();
}

inline void decode_stats(const std::string& bytes, EstimatorArchive& archive) {
  blockio::Reader r(bytes);
  const std::size_t iterations = r.u64_scalar("iterations");
  archive.winning_iteration = r.u64_scalar("winning_iteration");
  const auto& has_qbin = r.u64("has_qbin");
  const Vec& qbin = r.f64("qbin");
  const Vec& metric = r.f64("metric");
  const auto& counts = r.u64("record_counts");
  const auto& label = r.u64("record_label");
  const auto& predicted = r.u64("record_predicted");
  const Vec& soft_qbin = r.f64("record_soft_qbin");
  const Vec& o_true = r.f64("record_o_true");
  const Vec& p_centroid = r.f64("record_p_centroid");
  if (has_qbin.size() != iterations || counts.size() != iterations) {
    throw Error("archive stats malformed");
  }
  std::size_t cursor = 0;
  for (std::size_t j = 0; j < iterations; ++j) {
    IterationStats it;
    if (has_qbin[j] != 0) it.min_valid_qbin = qbin[j];
    it.metric = metric[j];
    for (std::size_t i = 0; i < counts[j]; ++i, ++cursor) {
      if (cursor >= label.size()) throw Error("archive stats malformed");
      it.records.push_back({label[cursor], predicted[cursor], soft_qbin[cursor], o_true[cursor],
                            p_centroid[cursor]});
    }
    archive.iteration_stats.push_back(std::move(it));
  }
}

inline std::string encode_baseline_cache(const EstimatorArchive& archive) {
  blockio::Writer w;
  w.str("calibration_ids", archive.calibration_ids);
  w.u64("calibration_labels", to_u64(archive.calibration_labels));
  write_matrix(w, "calibration_logits", archive.calibration_logits);
  return w.bytes();
}

inline void decode_baseline_cache(const std::string& bytes, EstimatorArchive& archive) {
  blockio::Reader r(bytes);
  archive.calibration_ids = r.str("calibration_ids");
  archive.calibration_labels = to_size(r.u64("calibration_labels"));
  archive.calibration_logits = read_matrix(r, "calibration_logits");
}

}  // namespace detail

// Saves the archive as a directory of block files; the manifest (with the
// per-file checksums) is written last.
inline void save_archive(const EstimatorArchive& archive, const std::string& dir_path) {
  namespace fs = std::filesystem;
  const fs::path dir(dir_path);
  fs::create_directories(dir);
  detail::DirectoryLock lock(dir);

  const std::map<std::string, std::string> files = {
      {"adaptor.bin", detail::encode_adaptor(archive)},
      {"support.bin", detail::encode_support(archive)},
      {"tables.bin", detail::encode_tables(archive)},
      {"thresholds.bin", detail::encode_thresholds(archive)},
      {"stats.bin", detail::encode_stats(archive)},
      {"baseline_cache.bin", detail::encode_baseline_cache(archive)},
  };

  nlohmann::json manifest;
  manifest["format_version"] = archive.format_version;
  manifest["alpha_prime"] = archive.alpha_prime;
  manifest["config"] = archive_config_to_json(archive.config);
  manifest["dataset_fingerprint"] = archive.dataset_fingerprint;
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  manifest["created_unix_ms"] =
      std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
  nlohmann::json checksums;
  for (const auto& [name, bytes] : files) {
    detail::write_file_bytes(dir / name, bytes);
    checksums[name] = {{"bytes", bytes.size()}, {"crc32", crc32_hex(bytes)}};
  }
  manifest["files"] = checksums;
  detail::write_file_bytes(dir / "manifest.json", manifest.dump(2) + "\n");
}

// Loads and validates an archive directory; any checksum or size mismatch
// fails the load.
inline EstimatorArchive load_archive(const std::string& dir_path) {
  namespace fs = std::filesystem;
  const fs::path dir(dir_path);
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw Error("archive manifest missing: " + manifest_path.string());
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_file_bytes(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("archive manifest malformed: ") + e.what());
  }
  EstimatorArchive archive;
  archive.format_version = manifest.at("format_version").get<std::uint32_t>();
  if (archive.format_version != kArchiveFormatVersion) {
    throw Error("unsupported archive format version " + std::to_string(archive.format_version));
  }
  archive.alpha_prime = manifest.at("alpha_prime").get<double>();
  archive.config = archive_config_from_json(manifest.at("config"));
  archive.dataset_fingerprint = manifest.value("dataset_fingerprint", "");

  std::map<std::string, std::string> files;
  for (const auto& [name, meta] : manifest.at("files").items()) {
    const std::string bytes = detail::read_file_bytes(dir / name);
    if (bytes.size() != meta.at("bytes").get<std::size_t>() ||
        crc32_hex(bytes) != meta.at("crc32").get<std::string>()) {
      throw Error("archive checksum mismatch for " + name);
    }
    files[name] = bytes;
  }
  auto need = [&files](const std::string& name) -> const std::string& {
    const auto it = files.find(name);
    if (it == files.end()) throw Error("archive file missing: " + name);
    return it->second;
  };
  detail::decode_adaptor(need("adaptor.bin"), archive);
  detail::decode_support(need("support.bin"), archive);
  detail::decode_tables(need("tables.bin"), archive);
  detail::decode_thresholds(need("thresholds.bin"), archive);
  detail::decode_stats(need("stats.bin"), archive);
  detail::decode_baseline_cache(need("baseline_cache.bin"), archive);
  archive.validate();
  return archive;
}

}  // namespace sdm
