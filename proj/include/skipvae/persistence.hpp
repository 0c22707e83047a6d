// Checkpoint container and metric / latent / history export.
//
// Checkpoint layout (little-endian):
//   "SKVZ" | u32 version | u64 seed | u64 epochs_completed
//   | u32 len, config text (model and train keys)
//   | u32 record count | per record: u32 len, name, u32 rank, u64 dims[rank], f64 payload
//   | u32 CRC-32 of every preceding byte
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "skipvae/config.hpp"
#include "skipvae/dataset.hpp"
#include "skipvae/metrics.hpp"
#include "skipvae/training.hpp"

namespace skipvae {

class CheckpointError : public DataError {
 public:
  enum class Kind { io, magic, version, crc, truncated, format };
  CheckpointError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::array<char, 4> kCheckpointMagic{'S', 'K', 'V', 'Z'};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) {
      throw CheckpointError(CheckpointError::Kind::truncated,
                            "checkpoint truncated at byte " + std::to_string(pos_) + " (needed " +
                                std::to_string(n) + " more bytes)");
    }
  }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::string checkpoint_config_text(const Checkpoint& c) {
  RunConfig rc;
  rc.model = c.model;
  rc.train = c.train;
  std::string out;
  std::istringstream in(config_to_text(rc));
  std::string line, section;
  while (std::getline(in, line)) {
    if (!line.empty() && line.front() == '[') section = line;
    if (section == "[model]" || section == "[train]") out += line + "\n";
  }
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  detail::Writer w;
  w.bytes.insert(w.bytes.end(), kCheckpointMagic.begin(), kCheckpointMagic.end());
  w.put(c.version);
  w.put(static_cast<std::uint64_t>(c.seed));
  w.put(static_cast<std::uint64_t>(c.epochs_completed));
  w.put_string(detail::checkpoint_config_text(c));
  std::uint32_t records = 0;
  for_each_parameter(c.params, [&](const std::string&, const Tensor&) { ++records; });
  w.put(records);
  for_each_parameter(c.params, [&](const std::string& name, const Tensor& t) {
    w.put_string(name);
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put(static_cast<std::uint64_t>(d));
    for (double v : t.values()) w.put(v);
  });
  w.put(detail::crc32_of(w.bytes));
  return std::move(w.bytes);
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  using Kind = CheckpointError::Kind;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0) {
    if (bytes.size() < 4) throw CheckpointError(Kind::truncated, "checkpoint truncated before the magic string");
    throw CheckpointError(Kind::magic, "not a checkpoint: missing SKVZ magic");
  }
  detail::Reader header(bytes.subspan(4));
  const auto version = header.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::version, "unsupported checkpoint version " + std::to_string(version) +
                                             " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }

  auto parse = [&](std::span<const std::uint8_t> body) {
    detail::Reader r(body.subspan(8));
    Checkpoint c;
    c.version = version;
    c.seed = r.get<std::uint64_t>();
    c.epochs_completed = static_cast<std::size_t>(r.get<std::uint64_t>());
    RunConfig rc;
    try {
      parse_config_text(rc, r.get_string(), "checkpoint");
    } catch (const ConfigError& e) {
      throw CheckpointError(Kind::format, std::string("checkpoint config: ") + e.what());
    }
    c.model = rc.model;
    c.train = rc.train;
    c.params = init_params(c.model, 0);
    std::map<std::string, Tensor*> slots;
    for_each_parameter(c.params, [&](const std::string& name, Tensor& t) { slots[name] = &t; });
    const auto records = r.get<std::uint32_t>();
    if (records != slots.size()) {
      throw CheckpointError(Kind::format, "checkpoint has " + std::to_string(records) + " tensors, model expects " +
                                              std::to_string(slots.size()));
    }
    for (std::uint32_t k = 0; k < records; ++k) {
      const std::string name = r.get_string();
      const auto rank = r.get<std::uint32_t>();
      if (rank == 0 || rank > 2) throw CheckpointError(Kind::format, "tensor '" + name + "' has unsupported rank");
      Shape shape;
      for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
      auto it = slots.find(name);
      if (it == slots.end()) throw CheckpointError(Kind::format, "unexpected tensor '" + name + "'");
      if (it->second->shape() != shape) {
        throw CheckpointError(Kind::format, "tensor '" + name + "' has shape " + to_string(shape) + ", expected " +
                                                to_string(it->second->shape()));
      }
      const std::size_t n = element_count(shape);
      r.need(n * sizeof(double));
      std::vector<double> v(n);
      for (auto& x : v) x = r.get<double>();
      *it->second = Tensor(shape, std::move(v));
    }
    if (r.position() != body.size() - 8) throw CheckpointError(Kind::format, "trailing bytes after tensor records");
    return c;
  };

  if (bytes.size() < 4 + 4 + 4) throw CheckpointError(Kind::truncated, "checkpoint truncated before the CRC");
  const auto body = bytes.first(bytes.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (stored != detail::crc32_of(body)) {
    // Distinguish a short file from a corrupted one.
    try {
      parse(body);
    } catch (const CheckpointError& e) {
      if (e.kind() == Kind::truncated) throw;
    }
    throw CheckpointError(Kind::crc, "checkpoint CRC mismatch: file is corrupt");
  }
  return parse(body);
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  try {
    detail::write_file(path, encode_checkpoint(c));
  } catch (const DataError& e) {
    throw CheckpointError(CheckpointError::Kind::io, e.what());
  }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = detail::read_file(path);
  } catch (const DataError& e) {
    throw CheckpointError(CheckpointError::Kind::io, e.what());
  }
  return decode_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Metric export
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = {"model_id", "dim",   "layers", "elbo",        "recon",
                                                "kl",       "mi",    "mi_se",  "au",          "is_nll",
                                                "n_eval",   "n_mi_points", "S", "seed"};
  return cols;
}

/// Column values in schema order, formatted as they appear in both files.
inline std::vector<std::string> report_values(const CollapseReport& r) {
  return {r.model_id,
          std::to_string(r.dim),
          std::to_string(r.layers),
          format_double(r.elbo),
          format_double(r.recon),
          format_double(r.kl_term),
          format_double(r.mi_estimate),
          format_double(r.mi_standard_error),
          std::to_string(r.au_count),
          format_double(r.is_nll),
          std::to_string(r.n_eval),
          std::to_string(r.n_mi_points),
          std::to_string(r.mi_samples_per_point),
          std::to_string(r.seed)};
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string csv_line(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) out += (i ? "," : "") + csv_field(fields[i]);
  return out + "\n";
}

inline std::string reports_to_csv(std::span<const CollapseReport> reports) {
  std::string out = csv_line(report_columns());
  for (const auto& r : reports) out += csv_line(report_values(r));
  return out;
}

inline nlohmann::ordered_json report_to_json(const CollapseReport& r) {
  nlohmann::ordered_json j;
  j["model_id"] = r.model_id;
  j["dim"] = r.dim;
  j["layers"] = r.layers;
  j["elbo"] = r.elbo;
  j["recon"] = r.recon;
  j["kl"] = r.kl_term;
  j["mi"] = r.mi_estimate;
  j["mi_se"] = r.mi_standard_error;
  j["au"] = r.au_count;
  j["is_nll"] = r.is_nll;
  j["n_eval"] = r.n_eval;
  j["n_mi_points"] = r.n_mi_points;
  j["S"] = r.mi_samples_per_point;
  j["seed"] = r.seed;
  return j;
}

inline std::string reports_to_json(std::span<const CollapseReport> reports) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : reports) arr.push_back(report_to_json(r));
  return arr.dump(2) + "\n";
}

enum class ExportFormat { csv, json };

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

inline void export_metrics(std::span<const CollapseReport> reports, const std::filesystem::path& path,
                           ExportFormat format) {
  write_text(path, format == ExportFormat::csv ? reports_to_csv(reports) : reports_to_json(reports));
}

/// example_id,label,mean_1..mean_D; label is empty for unlabeled data.
inline std::string latents_to_csv(const Tensor& means, const std::optional<std::vector<int>>& labels) {
  std::vector<std::string> header{"example_id", "label"};
  for (std::size_t d = 0; d < means.cols(); ++d) header.push_back("mean_" + std::to_string(d + 1));
  std::string out = csv_line(header);
  for (std::size_t i = 0; i < means.rows(); ++i) {
    std::vector<std::string> row{std::to_string(i), labels ? std::to_string((*labels)[i]) : std::string()};
    for (std::size_t d = 0; d < means.cols(); ++d) row.push_back(format_double(means.at(i, d)));
    out += csv_line(row);
  }
  return out;
}

/// Per-epoch history without wall-clock time, so reruns are byte-identical.
inline std::string history_to_csv(const TrainHistory& h) {
  std::string out = csv_line({"epoch", "elbo", "recon", "kl", "kl_weight"});
  for (const auto& e : h.epochs) {
    out += csv_line({std::to_string(e.epoch), format_double(e.elbo), format_double(e.recon), format_double(e.kl),
                     format_double(e.kl_weight)});
  }
  return out;
}

inline std::string timing_to_csv(const TrainHistory& h) {
  std::string out = csv_line({"epoch", "seconds"});
  for (const auto& e : h.epochs) out += csv_line({std::to_string(e.epoch), format_double(e.seconds)});
  return out;
}

}  // namespace skipvae
