#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fedvib/nn/tensor.hpp"

namespace fedvib::signal {

enum class Label { normal, anomalous };

std::string to_string(Label label);
std::optional<Label> parse_label(const std::string& text);

/// One timestamped measurement burst.
struct VibrationBatch {
  double timestamp = 0.0;  // seconds since the Unix epoch
  Tensor samples;          // [n_samples, n_features], acceleration in g
  double sampling_rate_hz = 0.0;
  std::optional<Label> label;

  std::size_t sample_count() const { return samples.rank() == 2 ? samples.dim(0) : 0; }
  std::size_t feature_count() const { return samples.rank() == 2 ? samples.dim(1) : 0; }
  bool is_anomalous() const { return label == Label::anomalous; }
};

struct Dataset {
  std::vector<VibrationBatch> batches;
  std::string source_id;
  std::size_t feature_count = 0;

  /// Uniform feature count, strictly increasing timestamps, finite samples.
  void validate() const;
  std::size_t size() const { return batches.size(); }
  /// Number of raw sample values (samples x features) over all batches.
  std::size_t value_count() const;
};

/// A consecutive slice of one batch; `values` is [window_size, n_features].
struct Window {
  Tensor values;
  std::size_t batch_index = 0;
  std::size_t offset = 0;
};

struct SplitSpec {
  double train_fraction = 0.70;
  double val_fraction_of_train = 0.08;
  void validate() const;
};

/// Chronological split by batch index. The training segment is the first
/// floor(train_fraction * N) batches; its last ceil(val_fraction * segment)
/// batches form `validation` and the rest `train`. The three are disjoint
/// and together cover every batch.
struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;

  std::size_t train_segment_size() const { return train.size() + validation.size(); }
};

// --- ingestion -----------------------------------------------------------

/// Timestamp encoded in an IMS file name (`YYYY.MM.DD.HH.MM.SS`), UTC.
double parse_ims_timestamp(const std::string& filename);

/// Reads one IMS measurement file. Returns one single-channel batch per
/// selected column (all columns when `channels` is empty).
std::vector<VibrationBatch> load_ims_batch(const std::filesystem::path& path,
                                           const std::vector<std::size_t>& channels = {},
                                           std::size_t expected_rows = 20480);

/// Loads every IMS file of a test-set directory (sorted by name) and keeps
/// `channels` as the features of each batch.
Dataset load_ims_directory(const std::filesystem::path& dir, const std::vector<std::size_t>& channels,
                           std::size_t expected_rows = 20480);

/// Manifest CSV `path,timestamp,sampling_rate_hz,label`; each referenced
/// batch file is CSV with header `t,<feature names>`.
Dataset load_csv_dataset(const std::filesystem::path& manifest_path);

/// Writes `dataset` as `manifest.csv` plus one CSV file per batch under `dir`.
/// Returns the manifest path.
std::filesystem::path write_csv_dataset(const Dataset& dataset, const std::filesystem::path& dir);

// --- preprocessing -------------------------------------------------------

enum class DownsampleMode { mean, decimate };

/// Reduces the sampling rate by `factor`: the mean of each consecutive group
/// of `factor` samples (or the first sample of each group when decimating).
/// A trailing partial group is dropped.
VibrationBatch downsample(const VibrationBatch& batch, std::size_t factor,
                          DownsampleMode mode = DownsampleMode::mean);

/// Non-overlapping consecutive windows; the trailing remainder is dropped.
std::vector<Window> make_windows(const VibrationBatch& batch, std::size_t window_size,
                                 std::size_t batch_index = 0);

/// Windows of the listed batches, in order.
std::vector<Window> windows_of(const Dataset& dataset, const std::vector<std::size_t>& batch_indices,
                               std::size_t window_size);

DatasetSplit chronological_split(std::size_t batch_count, const SplitSpec& spec = {});
DatasetSplit chronological_split(const Dataset& dataset, const SplitSpec& spec = {});

/// Per-feature standardization fitted on a subset of batches.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const Dataset& dataset, const std::vector<std::size_t>& batch_indices);
  void apply(Dataset& dataset) const;
};

// --- synthetic data ------------------------------------------------------

struct SynthConfig {
  std::size_t n_batches = 200;
  std::size_t batch_len = 800;
  double sampling_rate = 4000.0;
  std::size_t feature_count = 3;
  std::vector<std::size_t> anomaly_indices;
  double anomaly_amplitude_factor = 2.0;
  /// Sinusoid mixture of the normal regime.
  std::vector<double> frequencies_hz{50.0, 120.0, 310.0};
  std::vector<double> amplitudes{0.5, 0.25, 0.125};
  double noise_std = 0.05;
  double start_timestamp = 1.6e9;
  double batch_interval_s = 3600.0;
  std::uint64_t seed = 42;
  std::string source_id = "synthetic";
};

/// Normal batches: the sinusoid mixture with a random phase per batch and
/// axis plus Gaussian noise. Batches listed in `anomaly_indices` are scaled
/// by `anomaly_amplitude_factor` and labelled anomalous; all others normal.
Dataset synth_generate(const SynthConfig& config);

/// Root mean square over all values of a batch.
double rms(const VibrationBatch& batch);

}  // namespace fedvib::signal
