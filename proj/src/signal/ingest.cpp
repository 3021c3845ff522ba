#include <algorithm>
#include <charconv>
#include <cmath>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>

#include "fedvib/errors.hpp"
#include "fedvib/signal/signal.hpp"
#include "fedvib/text.hpp"

namespace fedvib::signal {

namespace fs = std::filesystem;

namespace {

std::string where(const fs::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

using text::parse_number;
using text::split_fields;

std::string format_float(float v) { return text::format_number(v); }
std::string format_double(double v) { return text::format_number(v); }

}  // namespace

std::string to_string(Label label) { return label == Label::anomalous ? "anomalous" : "normal"; }

std::optional<Label> parse_label(const std::string& text) {
  if (text == "normal" || text == "0") return Label::normal;
  if (text == "anomalous" || text == "anomaly" || text == "1") return Label::anomalous;
  return std::nullopt;
}

void Dataset::validate() const {
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const auto& b = batches[i];
    if (b.sample_count() < 1) throw IngestError(source_id + ": batch " + std::to_string(i) + " is empty");
    if (b.feature_count() != feature_count) {
      throw IngestError(source_id + ": batch " + std::to_string(i) + " has " +
                        std::to_string(b.feature_count()) + " features, dataset has " +
                        std::to_string(feature_count));
    }
    if (!b.samples.all_finite()) {
      throw IngestError(source_id + ": batch " + std::to_string(i) + " has non-finite samples");
    }
    if (i > 0 && !(b.timestamp > batches[i - 1].timestamp)) {
      throw IngestError(source_id + ": timestamps not strictly increasing at batch " + std::to_string(i));
    }
  }
}

std::size_t Dataset::value_count() const {
  std::size_t n = 0;
  for (const auto& b : batches) n += b.samples.size();
  return n;
}

double parse_ims_timestamp(const std::string& filename) {
  int parts[6];
  std::string_view name = filename;
  for (int k = 0; k < 6; ++k) {
    const auto dot = name.find('.');
    const auto field = k < 5 ? name.substr(0, dot) : name;
    if ((k < 5 && dot == std::string_view::npos) || !parse_number(field, parts[k])) {
      throw IngestError("unparseable IMS file name '" + filename + "'");
    }
    if (k < 5) name.remove_prefix(dot + 1);
  }
  std::tm tm{};
  tm.tm_year = parts[0] - 1900;
  tm.tm_mon = parts[1] - 1;
  tm.tm_mday = parts[2];
  tm.tm_hour = parts[3];
  tm.tm_min = parts[4];
  tm.tm_sec = parts[5];
  if (parts[1] < 1 || parts[1] > 12 || parts[2] < 1 || parts[2] > 31 || parts[3] > 23 ||
      parts[4] > 59 || parts[5] > 60) {
    throw IngestError("unparseable IMS file name '" + filename + "'");
  }
  return double(timegm(&tm));
}

std::vector<VibrationBatch> load_ims_batch(const fs::path& path, const std::vector<std::size_t>& channels,
                                           std::size_t expected_rows) {
  const double timestamp = parse_ims_timestamp(path.filename().string());
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open " + path.string());

  std::vector<std::vector<float>> columns;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto fields = split_fields(line, ' ');
    if (fields.empty()) continue;
    if (width == 0) {
      width = fields.size();
      columns.resize(width);
      for (std::size_t c : channels) {
        if (c >= width) {
          throw IngestError(where(path, line_no) + ": channel " + std::to_string(c) +
                            " requested but file has " + std::to_string(width) + " columns");
        }
      }
    }
    if (fields.size() != width) {
      throw IngestError(where(path, line_no) + ": expected " + std::to_string(width) +
                        " columns, found " + std::to_string(fields.size()));
    }
    for (std::size_t c = 0; c < width; ++c) {
      float v;
      if (!parse_number(fields[c], v) || !std::isfinite(v)) {
        throw IngestError(where(path, line_no) + ": non-numeric value '" + std::string(fields[c]) + "'");
      }
      columns[c].push_back(v);
    }
  }
  if (width == 0) throw IngestError(path.string() + ": no samples");
  if (expected_rows != 0 && columns[0].size() != expected_rows) {
    throw IngestError(path.string() + ": expected " + std::to_string(expected_rows) + " rows, found " +
                      std::to_string(columns[0].size()));
  }

  std::vector<std::size_t> selected = channels;
  if (selected.empty()) {
    for (std::size_t c = 0; c < width; ++c) selected.push_back(c);
  }
  std::vector<VibrationBatch> out;
  for (std::size_t c : selected) {
    const std::size_t n = columns[c].size();
    out.push_back({timestamp, Tensor({n, 1}, columns[c]), 20480.0, std::nullopt});
  }
  return out;
}

Dataset load_ims_directory(const fs::path& dir, const std::vector<std::size_t>& channels,
                           std::size_t expected_rows) {
  if (!fs::is_directory(dir)) throw IngestError("IMS directory not found: " + dir.string());
  if (channels.empty()) throw IngestError("no IMS channels selected");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().filename().string().front() != '.') {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());

  Dataset ds;
  ds.source_id = dir.filename().string();
  ds.feature_count = channels.size();
  for (const auto& file : files) {
    auto per_channel = load_ims_batch(file, channels, expected_rows);
    const std::size_t n = per_channel.front().sample_count();
    Tensor samples({n, channels.size()});
    for (std::size_t k = 0; k < channels.size(); ++k) {
      for (std::size_t i = 0; i < n; ++i) samples.at(i, k) = per_channel[k].samples[i];
    }
    ds.batches.push_back({per_channel.front().timestamp, std::move(samples), 20480.0, std::nullopt});
  }
  ds.validate();
  return ds;
}

Dataset load_csv_dataset(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IngestError("cannot open manifest " + manifest_path.string());
  const fs::path base = manifest_path.parent_path();

  Dataset ds;
  ds.source_id = manifest_path.parent_path().filename().string();
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> col;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_fields(line, ',');
    if (col.empty()) {
      for (std::size_t i = 0; i < fields.size(); ++i) col[std::string(fields[i])] = i;
      for (const char* required : {"path", "timestamp", "sampling_rate_hz"}) {
        if (!col.count(required)) {
          throw IngestError(where(manifest_path, line_no) + ": manifest lacks column '" + required + "'");
        }
      }
      continue;
    }
    auto field = [&](const char* name) -> std::string {
      const auto it = col.find(name);
      if (it == col.end() || it->second >= fields.size()) return {};
      return std::string(fields[it->second]);
    };
    VibrationBatch batch;
    if (!parse_number(field("timestamp"), batch.timestamp) ||
        !parse_number(field("sampling_rate_hz"), batch.sampling_rate_hz) || !(batch.sampling_rate_hz > 0)) {
      throw IngestError(where(manifest_path, line_no) + ": bad timestamp or sampling rate");
    }
    const std::string label = field("label");
    if (!label.empty()) {
      batch.label = parse_label(label);
      if (!batch.label) throw IngestError(where(manifest_path, line_no) + ": unknown label '" + label + "'");
    }

    const fs::path batch_path = base / field("path");
    std::ifstream bin(batch_path);
    if (!bin) throw IngestError(where(manifest_path, line_no) + ": missing batch file " + batch_path.string());
    std::string row;
    std::size_t row_no = 0;
    std::size_t width = 0;
    std::vector<float> values;
    while (std::getline(bin, row)) {
      ++row_no;
      if (row.empty() || row == "\r") continue;
      const auto cells = split_fields(row, ',');
      if (width == 0) {
        if (cells.size() < 2 || cells[0] != "t") {
          throw IngestError(where(batch_path, row_no) + ": header must be t,<features>");
        }
        width = cells.size() - 1;
        continue;
      }
      if (cells.size() != width + 1) {
        throw IngestError(where(batch_path, row_no) + ": expected " + std::to_string(width + 1) +
                          " columns, found " + std::to_string(cells.size()));
      }
      for (std::size_t c = 1; c <= width; ++c) {
        float v;
        if (!parse_number(cells[c], v) || !std::isfinite(v)) {
          throw IngestError(where(batch_path, row_no) + ": non-numeric value '" + std::string(cells[c]) + "'");
        }
        values.push_back(v);
      }
    }
    if (width == 0 || values.empty()) throw IngestError(batch_path.string() + ": no samples");
    if (ds.batches.empty()) {
      ds.feature_count = width;
    } else if (width != ds.feature_count) {
      throw IngestError(where(batch_path, 1) + ": " + std::to_string(width) +
                        " features, but earlier batches have " + std::to_string(ds.feature_count));
    }
    const std::size_t rows = values.size() / width;
    batch.samples = Tensor({rows, width}, std::move(values));
    ds.batches.push_back(std::move(batch));
  }
  if (ds.batches.empty()) throw IngestError(manifest_path.string() + ": manifest lists no batches");
  ds.validate();
  return ds;
}

fs::path write_csv_dataset(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir);
  const fs::path manifest = dir / "manifest.csv";
  std::ofstream out(manifest);
  if (!out) throw IngestError("cannot write " + manifest.string());
  out << "path,timestamp,sampling_rate_hz,label\n";
  for (std::size_t i = 0; i < dataset.batches.size(); ++i) {
    const auto& b = dataset.batches[i];
    char name[32];
    std::snprintf(name, sizeof name, "batch_%06zu.csv", i);
    out << name << ',' << format_double(b.timestamp) << ',' << format_double(b.sampling_rate_hz) << ','
        << (b.label ? to_string(*b.label) : "") << '\n';

    std::ofstream bf(dir / name);
    if (!bf) throw IngestError("cannot write " + (dir / name).string());
    bf << 't';
    for (std::size_t f = 0; f < b.feature_count(); ++f) bf << ",a" << f;
    bf << '\n';
    for (std::size_t r = 0; r < b.sample_count(); ++r) {
      bf << format_double(double(r) / b.sampling_rate_hz);
      for (std::size_t f = 0; f < b.feature_count(); ++f) bf << ',' << format_float(b.samples.at(r, f));
      bf << '\n';
    }
    if (!bf) throw IngestError("failed writing " + (dir / name).string());
  }
  if (!out) throw IngestError("failed writing " + manifest.string());
  return manifest;
}

}  // namespace fedvib::signal
