#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fedvib/cm/detection.hpp"
#include "fedvib/cm/training.hpp"
#include "fedvib/fed/transport.hpp"
#include "fedvib/fed/weights.hpp"
#include "fedvib/fed/wire.hpp"
#include "fedvib/signal/signal.hpp"

namespace fedvib::fed {

// --- round bookkeeping ---------------------------------------------------------

enum class RoundStatus { collecting, aggregated, distributed };

std::string to_string(RoundStatus status);

struct RoundState {
  std::uint64_t round = 0;
  ModelWeights global_weights;
  std::set<std::string> expected_clients;
  std::map<std::string, WeightDelta> received;
  RoundStatus status = RoundStatus::collecting;

  bool complete() const;
  std::vector<std::string> missing() const;
};

RoundState begin_round(std::uint64_t round, ModelWeights global, std::set<std::string> expected_clients);

/// Records a client's delta. Throws ProtocolError for unknown or repeated
/// clients, a wrong base round or a closed round, DimensionError for a layout
/// that differs from the global model.
void submit_delta(RoundState& state, const std::string& client_id, WeightDelta delta);

/// global + fedavg(received), with the deltas taken in client-id order.
/// Throws StateError unless the round is collecting and complete.
ModelWeights aggregate_round(RoundState& state);

/// Throws StateError unless the round was aggregated.
void mark_distributed(RoundState& state);

// --- aggregation node ----------------------------------------------------------

struct AggregatorConfig {
  std::size_t expected_clients = 1;
  std::size_t rounds = 25;
  Millis round_timeout{std::chrono::minutes(10)};
  Millis registration_timeout{std::chrono::minutes(10)};
};

/// Protocol-level summary of one federated round. Round k (1-based) covers the
/// GlobalModel{k-1} distribution, the DeltaSubmission{k-1} uploads and their
/// Acks; byte counts are encoded frame sizes.
struct AggregationRecord {
  std::uint64_t round = 0;
  std::vector<std::string> clients;
  std::map<std::string, std::uint64_t> windows_trained;
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  std::uint64_t global_fingerprint = 0;  // model produced by this round
  double duration_s = 0.0;
};

struct TrafficSummary {
  std::uint64_t setup_bytes = 0;  // registrations and errors before round 1
  std::uint64_t final_bytes = 0;  // distribution of the final model
  std::uint64_t round_bytes = 0;  // sum over AggregationRecords
  std::uint64_t aborted_bytes = 0;  // traffic of a round that never completed
  std::uint64_t total() const { return setup_bytes + final_bytes + round_bytes + aborted_bytes; }
};

struct Outgoing {
  PeerId peer = 0;
  Message message;
  bool close_after = false;  // drop the connection once sent
};

/// Transport-independent aggregation node. Feed it events; it answers with
/// the messages to send. All state changes go through this one object.
class AggregationCoordinator {
 public:
  AggregationCoordinator(AggregatorConfig config, ModelWeights initial_global);

  std::vector<Outgoing> handle(PeerId peer, const Message& message);
  std::vector<Outgoing> on_disconnect(PeerId peer);
  /// Aborts the pending registration phase or round; no partial aggregation.
  std::vector<Outgoing> on_timeout();

  bool started() const { return state_.has_value(); }
  bool finished() const { return finished_; }
  bool aborted() const { return aborted_; }
  const std::string& diagnostic() const { return diagnostic_; }
  /// Current round index (the base round of the deltas being collected).
  std::uint64_t round() const { return state_ ? state_->round : 0; }
  const ModelWeights& global() const { return global_; }
  const std::vector<AggregationRecord>& records() const { return records_; }
  const TrafficSummary& traffic() const { return traffic_; }
  /// Wall-clock deadline bookkeeping for run loops.
  std::chrono::steady_clock::time_point phase_started() const { return phase_started_; }

 private:
  enum class Bucket { setup, round, final_model };

  void account(Bucket bucket, std::uint64_t bytes, bool sent);
  void send(std::vector<Outgoing>& out, PeerId peer, Message message, Bucket bucket, bool close_after = false);
  void start_round(std::uint64_t round, std::vector<Outgoing>& out);
  std::vector<Outgoing> abort(const std::string& why, PeerId culprit = 0);
  Bucket current_bucket() const;

  AggregatorConfig config_;
  ModelWeights global_;
  std::optional<RoundState> state_;
  std::map<std::string, PeerId> clients_;  // active registrations
  std::map<PeerId, std::string> peers_;
  AggregationRecord current_;
  std::vector<AggregationRecord> records_;
  TrafficSummary traffic_;
  std::chrono::steady_clock::time_point phase_started_;
  bool finished_ = false;
  bool aborted_ = false;
  std::string diagnostic_;
};

struct AggregationResult {
  bool aborted = false;
  std::string diagnostic;
  ModelWeights final_global;
  std::vector<AggregationRecord> records;
  TrafficSummary traffic;
};

/// Blocking aggregation loop over `transport` until every round is done or a
/// round is aborted.
AggregationResult aggregation_node_run(ServerTransport& transport, const AggregatorConfig& config,
                                       ModelWeights initial_global);

// --- training node -------------------------------------------------------------

/// One node's data, split chronologically and cut into windows.
struct LocalData {
  signal::Dataset dataset;
  signal::DatasetSplit split;
  std::vector<signal::Window> train_windows;
  std::vector<signal::Window> validation_windows;
  /// Batches whose scores calibrate the threshold (default: the validation batches).
  std::vector<std::size_t> calibration_batches;

  static LocalData prepare(signal::Dataset dataset, const signal::SplitSpec& split, std::size_t window_size);
};

struct NodeConfig {
  std::string client_id;
  nn::AutoencoderConfig model;
  nn::TrainConfig train;
  std::size_t rounds = 25;
  std::size_t epochs_per_round = 1;
  std::uint64_t seed = 1;
  /// Keep the Adam moments across rounds instead of resetting them when a new
  /// global model arrives.
  bool persist_optimizer = false;
  /// When set, round r trains on the first min(step * r, available) windows.
  std::optional<std::size_t> cold_start_step;
  double delta = 3.0;
  cm::ThresholdMode threshold_mode = cm::ThresholdMode::mean_plus_sigma;
  cm::ReferenceUnit reference_unit = cm::ReferenceUnit::window;
  /// Recalibrate and score test batches after every received global model;
  /// otherwise only after the final one.
  bool evaluate_every_round = true;
};

/// Per received global model: local training and detection state.
struct NodeRoundRecord {
  std::uint64_t model_round = 0;  // round of the GlobalModel that was evaluated/trained from
  std::vector<cm::EpochStats> epochs;
  std::size_t windows_trained = 0;
  double train_seconds = 0.0;
  std::optional<cm::ThresholdModel> threshold;
  std::vector<double> test_scores;
};

/// Transport-independent training node.
class TrainingNode {
 public:
  TrainingNode(NodeConfig config, const LocalData& data);

  Message start() const { return Register{config_.client_id}; }

  /// Reacts to one message from the aggregator. GlobalModel{r} loads the
  /// weights, evaluates, and unless r is the final round trains and returns a
  /// DeltaSubmission{r}. Throws ProtocolError on fatal errors.
  std::vector<Message> handle(const Message& message);

  bool finished() const { return finished_; }
  const NodeConfig& config() const { return config_; }
  const nn::Autoencoder& model() const { return model_; }
  const std::vector<NodeRoundRecord>& records() const { return records_; }
  std::size_t deltas_sent() const { return deltas_sent_; }
  /// Windows used for training in round r (1-based).
  std::size_t windows_for_round(std::size_t round) const;

  /// Threshold from the calibration batches under the current model.
  cm::ThresholdModel calibrate() const;
  /// Anomaly scores of the test batches under the current model.
  std::vector<double> score_test() const;

 private:
  NodeConfig config_;
  const LocalData& data_;
  nn::Autoencoder model_;
  cm::Trainer trainer_;
  std::optional<std::uint64_t> last_round_;
  std::vector<NodeRoundRecord> records_;
  std::size_t deltas_sent_ = 0;
  bool finished_ = false;
};

struct NodeRunOptions {
  RetryPolicy retry;
  Millis receive_timeout{std::chrono::minutes(15)};
};

struct NodeRunResult {
  bool completed = false;
  std::string diagnostic;
  std::size_t deltas_sent = 0;
};

/// Blocking training loop: connect (bounded retry with backoff), register,
/// then answer every GlobalModel until the final one arrives.
NodeRunResult training_node_run(ClientTransport& transport, TrainingNode& node, const NodeRunOptions& options = {});

// --- deterministic simulation ----------------------------------------------------

/// Runs an aggregator and training nodes in one thread over an in-process hub,
/// advancing in round-robin order. Every message is framed and metered.
class Simulation {
 public:
  Simulation(AggregatorConfig config, ModelWeights initial_global, TrafficMeter* meter = nullptr);

  /// Adds a node; `data` must outlive the simulation.
  TrainingNode& add_node(NodeConfig config, const LocalData& data);
  /// Registers a node after the federation has started (late join).
  TrainingNode& add_late_node(NodeConfig config, const LocalData& data, std::uint64_t join_at_round);

  /// Runs to completion or abort. `on_round` fires after each aggregation.
  void run(const std::function<void(const AggregationRecord&)>& on_round = {});
  /// Simulates a silent client: the coordinator times out the current round
  /// once every other message has been delivered.
  void silence(const std::string& client_id) { silenced_.insert(client_id); }

  const AggregationCoordinator& coordinator() const { return coordinator_; }
  std::vector<TrainingNode*> nodes();

 private:
  struct Member {
    std::unique_ptr<TrainingNode> node;
    std::unique_ptr<ClientTransport> transport;
    std::optional<std::uint64_t> join_at_round;
    bool joined = false;
  };

  std::shared_ptr<InProcessHub> hub_;
  std::unique_ptr<ServerTransport> server_;
  AggregationCoordinator coordinator_;
  std::vector<Member> members_;
  std::set<std::string> silenced_;
};

}  // namespace fedvib::fed
