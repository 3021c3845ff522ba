#include "fedvib/fed/federation.hpp"

#include <algorithm>
#include <thread>

#include "fedvib/errors.hpp"

namespace fedvib::fed {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ", ") + s;
  return out;
}

}  // namespace

// --- round bookkeeping ---------------------------------------------------------

std::string to_string(RoundStatus status) {
  switch (status) {
    case RoundStatus::collecting: return "collecting";
    case RoundStatus::aggregated: return "aggregated";
    case RoundStatus::distributed: return "distributed";
  }
  return "unknown";
}

bool RoundState::complete() const {
  return std::all_of(expected_clients.begin(), expected_clients.end(),
                     [this](const std::string& c) { return received.contains(c); });
}

std::vector<std::string> RoundState::missing() const {
  std::vector<std::string> out;
  for (const auto& c : expected_clients)
    if (!received.contains(c)) out.push_back(c);
  return out;
}

RoundState begin_round(std::uint64_t round, ModelWeights global, std::set<std::string> expected_clients) {
  if (expected_clients.empty()) throw StateError("a round needs at least one expected client");
  RoundState s;
  s.round = round;
  s.global_weights = std::move(global);
  s.expected_clients = std::move(expected_clients);
  return s;
}

void submit_delta(RoundState& state, const std::string& client_id, WeightDelta delta) {
  if (state.status != RoundStatus::collecting) {
    throw ProtocolError("round " + std::to_string(state.round) + " is " + to_string(state.status));
  }
  if (!state.expected_clients.contains(client_id)) {
    throw ProtocolError("client '" + client_id + "' is not part of round " + std::to_string(state.round));
  }
  if (state.received.contains(client_id)) {
    throw ProtocolError("client '" + client_id + "' already submitted for round " + std::to_string(state.round));
  }
  if (delta.base_round != state.round) {
    throw ProtocolError("delta from '" + client_id + "' is based on round " + std::to_string(delta.base_round) +
                        ", expected " + std::to_string(state.round));
  }
  if (!delta.same_layout(state.global_weights)) {
    throw DimensionError("delta from '" + client_id + "' does not match the global model layout");
  }
  state.received.emplace(client_id, std::move(delta));
}

ModelWeights aggregate_round(RoundState& state) {
  if (state.status != RoundStatus::collecting) {
    throw StateError("cannot aggregate round " + std::to_string(state.round) + ": status is " +
                     to_string(state.status));
  }
  if (!state.complete()) {
    throw StateError("cannot aggregate round " + std::to_string(state.round) + ": waiting for " +
                     join(state.missing()));
  }
  std::vector<WeightDelta> deltas;
  deltas.reserve(state.received.size());
  for (const auto& [client, d] : state.received) deltas.push_back(d);
  ModelWeights next = apply_delta(state.global_weights, fedavg(deltas));
  state.status = RoundStatus::aggregated;
  return next;
}

void mark_distributed(RoundState& state) {
  if (state.status != RoundStatus::aggregated) {
    throw StateError("round " + std::to_string(state.round) + " cannot be distributed while " +
                     to_string(state.status));
  }
  state.status = RoundStatus::distributed;
}

// --- aggregation node ----------------------------------------------------------

AggregationCoordinator::AggregationCoordinator(AggregatorConfig config, ModelWeights initial_global)
    : config_(config), global_(std::move(initial_global)), phase_started_(std::chrono::steady_clock::now()) {
  if (config_.expected_clients == 0) throw ConfigError("expected_clients must be positive");
  global_.validate();
}

AggregationCoordinator::Bucket AggregationCoordinator::current_bucket() const {
  if (finished_) return Bucket::final_model;
  return state_ ? Bucket::round : Bucket::setup;
}

void AggregationCoordinator::account(Bucket bucket, std::uint64_t bytes, bool sent) {
  if (aborted_) {
    traffic_.aborted_bytes += bytes;
    return;
  }
  switch (bucket) {
    case Bucket::setup:
      traffic_.setup_bytes += bytes;
      break;
    case Bucket::final_model:
      traffic_.final_bytes += bytes;
      break;
    case Bucket::round:
      (sent ? current_.bytes_sent : current_.bytes_received) += bytes;
      break;
  }
}

void AggregationCoordinator::send(std::vector<Outgoing>& out, PeerId peer, Message message, Bucket bucket,
                                  bool close_after) {
  account(bucket, frame_size(message), true);
  out.push_back({peer, std::move(message), close_after});
}

void AggregationCoordinator::start_round(std::uint64_t round, std::vector<Outgoing>& out) {
  std::set<std::string> expected;
  for (const auto& [id, peer] : clients_) expected.insert(id);
  state_ = begin_round(round, global_, expected);
  current_ = AggregationRecord{};
  current_.round = round + 1;
  current_.clients.assign(expected.begin(), expected.end());
  phase_started_ = std::chrono::steady_clock::now();
  for (const auto& [id, peer] : clients_) send(out, peer, GlobalModel{round, global_}, Bucket::round);
}

std::vector<Outgoing> AggregationCoordinator::abort(const std::string& why, PeerId culprit) {
  aborted_ = true;
  diagnostic_ = why;
  std::vector<Outgoing> out;
  const Bucket bucket = current_bucket();
  for (const auto& [id, peer] : clients_) {
    const ErrorCode code = peer == culprit ? ErrorCode::layout_mismatch : ErrorCode::round_aborted;
    send(out, peer, ErrorMessage{code, why}, bucket, true);
  }
  if (state_) traffic_.aborted_bytes += current_.bytes_sent + current_.bytes_received;
  return out;
}

std::vector<Outgoing> AggregationCoordinator::handle(PeerId peer, const Message& message) {
  std::vector<Outgoing> out;
  const Bucket in_bucket = current_bucket();
  account(in_bucket, frame_size(message), false);
  if (finished_ || aborted_) {
    send(out, peer, ErrorMessage{ErrorCode::unexpected_message, "federation is over"}, current_bucket(), true);
    return out;
  }

  if (const auto* reg = std::get_if<Register>(&message)) {
    if (peers_.contains(peer)) {
      send(out, peer, ErrorMessage{ErrorCode::unexpected_message, "peer already registered"}, in_bucket);
      return out;
    }
    if (reg->client_id.empty() || clients_.contains(reg->client_id)) {
      send(out, peer, ErrorMessage{ErrorCode::duplicate_client, "client id '" + reg->client_id + "' is taken"},
           in_bucket, true);
      return out;
    }
    clients_[reg->client_id] = peer;
    peers_[peer] = reg->client_id;
    if (!state_) {
      if (clients_.size() == config_.expected_clients) {
        if (config_.rounds == 0) {
          finished_ = true;
          for (const auto& [id, p] : clients_) send(out, p, GlobalModel{0, global_}, Bucket::final_model);
        } else {
          start_round(0, out);
        }
      }
    } else {
      // Late joiner: gets the current model now, is expected from the next round on.
      send(out, peer, GlobalModel{state_->round, global_}, Bucket::round);
    }
    return out;
  }

  if (const auto* sub = std::get_if<DeltaSubmission>(&message)) {
    auto it = peers_.find(peer);
    if (it == peers_.end() || it->second != sub->client_id) {
      send(out, peer, ErrorMessage{ErrorCode::unexpected_message, "delta from an unregistered peer"}, in_bucket);
      return out;
    }
    if (!state_ || sub->round != state_->round || !state_->expected_clients.contains(sub->client_id) ||
        state_->received.contains(sub->client_id)) {
      send(out, peer,
           ErrorMessage{ErrorCode::stale_round, "delta for round " + std::to_string(sub->round) +
                                                    " is not part of the current round"},
           in_bucket);
      return out;
    }
    try {
      submit_delta(*state_, sub->client_id, sub->delta);
    } catch (const DimensionError& e) {
      return abort(e.what(), peer);
    } catch (const ProtocolError& e) {
      send(out, peer, ErrorMessage{ErrorCode::stale_round, e.what()}, in_bucket);
      return out;
    }
    current_.windows_trained[sub->client_id] = sub->windows_trained;
    send(out, peer, Ack{}, Bucket::round);
    if (state_->complete()) {
      global_ = aggregate_round(*state_);
      current_.global_fingerprint = global_.fingerprint();
      current_.duration_s = seconds_since(phase_started_);
      traffic_.round_bytes += current_.bytes_sent + current_.bytes_received;
      records_.push_back(current_);
      mark_distributed(*state_);
      const std::uint64_t next = state_->round + 1;
      if (next >= config_.rounds) {
        finished_ = true;
        for (const auto& [id, p] : clients_) send(out, p, GlobalModel{next, global_}, Bucket::final_model);
      } else {
        start_round(next, out);
      }
    }
    return out;
  }

  if (std::holds_alternative<ErrorMessage>(message)) return out;
  send(out, peer, ErrorMessage{ErrorCode::unexpected_message, to_string(type_of(message)) + " from a client"},
       in_bucket);
  return out;
}

std::vector<Outgoing> AggregationCoordinator::on_disconnect(PeerId peer) {
  auto it = peers_.find(peer);
  if (it == peers_.end()) return {};
  const std::string id = it->second;
  peers_.erase(it);
  clients_.erase(id);
  if (finished_ || aborted_ || !state_) return {};
  if (state_->expected_clients.contains(id)) {
    return abort("client '" + id + "' disconnected during round " + std::to_string(state_->round + 1));
  }
  return {};
}

std::vector<Outgoing> AggregationCoordinator::on_timeout() {
  if (finished_ || aborted_) return {};
  if (!state_) {
    return abort("registration timed out with " + std::to_string(clients_.size()) + " of " +
                 std::to_string(config_.expected_clients) + " clients");
  }
  return abort("round " + std::to_string(state_->round + 1) + " timed out with " +
               std::to_string(state_->received.size()) + " of " + std::to_string(state_->expected_clients.size()) +
               " deltas; missing: " + join(state_->missing()));
}

AggregationResult aggregation_node_run(ServerTransport& transport, const AggregatorConfig& config,
                                       ModelWeights initial_global) {
  AggregationCoordinator coordinator(config, std::move(initial_global));
  auto dispatch = [&](std::vector<Outgoing> outs) {
    while (!outs.empty()) {
      std::vector<Outgoing> more;
      for (auto& o : outs) {
        try {
          transport.send(o.peer, o.message);
          if (o.close_after) transport.close(o.peer);
        } catch (const TransportError&) {
          transport.close(o.peer);
          auto extra = coordinator.on_disconnect(o.peer);
          more.insert(more.end(), std::make_move_iterator(extra.begin()), std::make_move_iterator(extra.end()));
        }
      }
      outs = std::move(more);
    }
  };

  while (!coordinator.finished() && !coordinator.aborted()) {
    const Millis limit = coordinator.started() ? config.round_timeout : config.registration_timeout;
    const auto deadline = coordinator.phase_started() + limit;
    const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      dispatch(coordinator.on_timeout());
      break;
    }
    auto ev = transport.poll(std::min(left, Millis{200}));
    if (!ev) continue;
    if (ev->kind == ServerEvent::Kind::disconnected) {
      dispatch(coordinator.on_disconnect(ev->peer));
    } else {
      dispatch(coordinator.handle(ev->peer, *ev->message));
    }
  }

  AggregationResult result;
  result.aborted = coordinator.aborted();
  result.diagnostic = coordinator.diagnostic();
  result.final_global = coordinator.global();
  result.records = coordinator.records();
  result.traffic = coordinator.traffic();
  return result;
}

// --- training node -------------------------------------------------------------

LocalData LocalData::prepare(signal::Dataset dataset, const signal::SplitSpec& split, std::size_t window_size) {
  LocalData d;
  d.split = signal::chronological_split(dataset, split);
  d.train_windows = signal::windows_of(dataset, d.split.train, window_size);
  d.validation_windows = signal::windows_of(dataset, d.split.validation, window_size);
  d.calibration_batches = d.split.validation;
  d.dataset = std::move(dataset);
  return d;
}

TrainingNode::TrainingNode(NodeConfig config, const LocalData& data)
    : config_(std::move(config)),
      data_(data),
      model_(cm::build_autoencoder(config_.model, config_.seed)),
      trainer_(config_.train, config_.seed) {
  if (config_.client_id.empty()) throw ConfigError("client_id must not be empty");
  if (config_.epochs_per_round == 0) throw ConfigError("epochs_per_round must be positive");
  if (data_.dataset.feature_count != config_.model.feature_count) {
    throw ConfigError("dataset '" + data_.dataset.source_id + "' has " + std::to_string(data_.dataset.feature_count) +
                      " features, model expects " + std::to_string(config_.model.feature_count));
  }
  if (data_.train_windows.empty()) throw ConfigError("node '" + config_.client_id + "' has no training windows");
  if (config_.cold_start_step && *config_.cold_start_step == 0) throw ConfigError("cold_start_step must be positive");
}

std::size_t TrainingNode::windows_for_round(std::size_t round) const {
  const std::size_t available = data_.train_windows.size();
  if (!config_.cold_start_step) return available;
  return std::min(available, *config_.cold_start_step * round);
}

cm::ThresholdModel TrainingNode::calibrate() const {
  if (data_.calibration_batches.empty()) throw StateError("no calibration batches");
  return cm::calibrate_threshold(
      cm::reference_errors(model_, data_.dataset, data_.calibration_batches, config_.reference_unit), config_.delta,
      config_.threshold_mode);
}

std::vector<double> TrainingNode::score_test() const {
  return cm::score_batches(model_, data_.dataset, data_.split.test);
}

std::vector<Message> TrainingNode::handle(const Message& message) {
  if (const auto* gm = std::get_if<GlobalModel>(&message)) {
    if (finished_) throw ProtocolError("global model received after the final round");
    if (last_round_ && gm->round <= *last_round_) {
      throw ProtocolError("global model round " + std::to_string(gm->round) + " is not after " +
                          std::to_string(*last_round_));
    }
    try {
      load_weights(model_, gm->weights);
    } catch (const DimensionError& e) {
      throw ProtocolError(std::string("layout mismatch: ") + e.what());
    }
    last_round_ = gm->round;

    NodeRoundRecord rec;
    rec.model_round = gm->round;
    const bool final_round = gm->round >= config_.rounds;
    if ((config_.evaluate_every_round || final_round) && !data_.calibration_batches.empty()) {
      rec.threshold = calibrate();
      rec.test_scores = score_test();
    }
    if (final_round) {
      finished_ = true;
      records_.push_back(std::move(rec));
      return {};
    }

    if (!config_.persist_optimizer) trainer_.reset_optimizer();
    const std::size_t n = windows_for_round(std::size_t(gm->round) + 1);
    const std::span<const signal::Window> train(data_.train_windows.data(), n);
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t j = 0; j < config_.epochs_per_round; ++j) {
      const std::size_t epoch = std::size_t(gm->round) * config_.epochs_per_round + j;
      rec.epochs.push_back(trainer_.run_epoch(model_, train, data_.validation_windows, epoch));
    }
    rec.train_seconds = seconds_since(t0);
    rec.windows_trained = n;
    records_.push_back(std::move(rec));
    ++deltas_sent_;
    return {DeltaSubmission{config_.client_id, gm->round, n, compute_delta(weights_of(model_), gm->weights, gm->round)}};
  }
  if (std::holds_alternative<Ack>(message)) return {};
  if (const auto* err = std::get_if<ErrorMessage>(&message)) {
    if (err->code == ErrorCode::stale_round) return {};
    throw ProtocolError(to_string(err->code) + ": " + err->text);
  }
  throw ProtocolError("unexpected " + to_string(type_of(message)) + " from the aggregator");
}

NodeRunResult training_node_run(ClientTransport& transport, TrainingNode& node, const NodeRunOptions& options) {
  NodeRunResult result;
  Millis backoff = options.retry.initial_backoff;
  const std::size_t attempts = std::max<std::size_t>(1, options.retry.max_attempts);
  for (std::size_t attempt = 1;; ++attempt) {
    try {
      transport.connect();
      break;
    } catch (const TransportError& e) {
      if (attempt >= attempts) {
        result.diagnostic = "aggregator unreachable after " + std::to_string(attempts) + " attempts: " + e.what();
        return result;
      }
      std::this_thread::sleep_for(backoff);
      backoff = std::min(options.retry.max_backoff,
                         Millis(std::int64_t(double(backoff.count()) * options.retry.backoff_factor)));
    }
  }

  try {
    transport.send(node.start());
    while (!node.finished()) {
      auto msg = transport.receive(options.receive_timeout);
      if (!msg) {
        result.diagnostic = "timed out waiting for the aggregator";
        break;
      }
      for (const auto& reply : node.handle(*msg)) transport.send(reply);
    }
  } catch (const TransportError& e) {
    result.diagnostic = std::string("transport failure: ") + e.what();
  } catch (const ProtocolError& e) {
    result.diagnostic = e.what();
  } catch (const ParseError& e) {
    result.diagnostic = std::string("malformed message: ") + e.what();
  }
  result.completed = node.finished();
  result.deltas_sent = node.deltas_sent();
  transport.close();
  return result;
}

// --- deterministic simulation ----------------------------------------------------

Simulation::Simulation(AggregatorConfig config, ModelWeights initial_global, TrafficMeter* meter)
    : hub_(InProcessHub::create(meter)), server_(hub_->server()), coordinator_(config, std::move(initial_global)) {}

TrainingNode& Simulation::add_node(NodeConfig config, const LocalData& data) {
  Member m;
  m.node = std::make_unique<TrainingNode>(std::move(config), data);
  m.transport = hub_->client();
  members_.push_back(std::move(m));
  return *members_.back().node;
}

TrainingNode& Simulation::add_late_node(NodeConfig config, const LocalData& data, std::uint64_t join_at_round) {
  auto& node = add_node(std::move(config), data);
  members_.back().join_at_round = join_at_round;
  return node;
}

std::vector<TrainingNode*> Simulation::nodes() {
  std::vector<TrainingNode*> out;
  for (auto& m : members_) out.push_back(m.node.get());
  return out;
}

void Simulation::run(const std::function<void(const AggregationRecord&)>& on_round) {
  std::size_t reported = 0;
  auto dispatch = [&](std::vector<Outgoing> outs) {
    for (auto& o : outs) {
      try {
        server_->send(o.peer, o.message);
      } catch (const TransportError&) {
        // The peer already left; the coordinator learns via its disconnect event.
      }
    }
    while (on_round && reported < coordinator_.records().size()) on_round(coordinator_.records()[reported++]);
  };

  for (auto& m : members_) {
    if (m.join_at_round) continue;
    m.transport->connect();
    m.transport->send(m.node->start());
    m.joined = true;
  }

  std::set<std::size_t> failed;
  for (;;) {
    bool progress = false;
    while (auto ev = server_->poll(Millis{0})) {
      progress = true;
      if (ev->kind == ServerEvent::Kind::disconnected) {
        dispatch(coordinator_.on_disconnect(ev->peer));
      } else {
        dispatch(coordinator_.handle(ev->peer, *ev->message));
      }
    }
    for (auto& m : members_) {
      if (!m.joined && m.join_at_round && coordinator_.started() && !coordinator_.finished() &&
          coordinator_.round() >= *m.join_at_round) {
        m.transport->connect();
        m.transport->send(m.node->start());
        m.joined = true;
        progress = true;
      }
    }
    for (std::size_t i = 0; i < members_.size(); ++i) {
      auto& m = members_[i];
      if (!m.joined || failed.contains(i) || silenced_.contains(m.node->config().client_id)) continue;
      // One message per node per pass keeps the interleaving round-robin.
      std::optional<Message> msg;
      try {
        msg = m.transport->receive(Millis{0});
      } catch (const TransportError&) {
        failed.insert(i);
        continue;
      }
      if (!msg) continue;
      progress = true;
      try {
        for (const auto& reply : m.node->handle(*msg)) m.transport->send(reply);
      } catch (const ProtocolError&) {
        failed.insert(i);
      }
    }
    if (!progress) {
      if (coordinator_.finished() || coordinator_.aborted()) break;
      dispatch(coordinator_.on_timeout());
    }
  }
}

}  // namespace fedvib::fed
