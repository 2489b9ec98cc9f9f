#include <ucrdma/metrics.hpp>

#include <sys/resource.h>
#include <sys/time.h>

#include <thread>

namespace ucrdma {

CounterSnapshot CounterSet::snapshot() const {
  CounterSnapshot s;
  s.datagrams_tx = datagrams_tx.load(std::memory_order_relaxed);
  s.datagrams_rx = datagrams_rx.load(std::memory_order_relaxed);
  s.bytes_tx = bytes_tx.load(std::memory_order_relaxed);
  s.bytes_rx = bytes_rx.load(std::memory_order_relaxed);
  s.messages_completed = messages_completed.load(std::memory_order_relaxed);
  s.messages_dropped_incomplete = messages_dropped_incomplete.load(std::memory_order_relaxed);
  s.delivered_payload_bytes = delivered_payload_bytes.load(std::memory_order_relaxed);
  s.payload_copy_bytes = payload_copy_bytes.load(std::memory_order_relaxed);
  s.malformed_rx = malformed_rx.load(std::memory_order_relaxed);
  s.unknown_conn = unknown_conn.load(std::memory_order_relaxed);
  s.remote_invalid_stag = remote_invalid_stag.load(std::memory_order_relaxed);
  s.unauthorized_access = unauthorized_access.load(std::memory_order_relaxed);
  s.bounds_violation = bounds_violation.load(std::memory_order_relaxed);
  s.recv_no_buffer = recv_no_buffer.load(std::memory_order_relaxed);
  s.recv_too_small = recv_too_small.load(std::memory_order_relaxed);
  s.duplicate_fragment = duplicate_fragment.load(std::memory_order_relaxed);
  s.stale_fragment = stale_fragment.load(std::memory_order_relaxed);
  s.duplicate_read_req = duplicate_read_req.load(std::memory_order_relaxed);
  s.read_resp_unmatched = read_resp_unmatched.load(std::memory_order_relaxed);
  s.reads_timed_out = reads_timed_out.load(std::memory_order_relaxed);
  s.imm_notify_dropped = imm_notify_dropped.load(std::memory_order_relaxed);
  s.data_after_close = data_after_close.load(std::memory_order_relaxed);
  s.control_dropped = control_dropped.load(std::memory_order_relaxed);
  s.tx_would_block = tx_would_block.load(std::memory_order_relaxed);
  return s;
}

nlohmann::json CounterSnapshot::to_json() const {
  return nlohmann::json{
      {"datagrams_tx", datagrams_tx},
      {"datagrams_rx", datagrams_rx},
      {"bytes_tx", bytes_tx},
      {"bytes_rx", bytes_rx},
      {"messages_completed", messages_completed},
      {"messages_dropped_incomplete", messages_dropped_incomplete},
      {"delivered_payload_bytes", delivered_payload_bytes},
      {"payload_copy_bytes", payload_copy_bytes},
      {"malformed_rx", malformed_rx},
      {"unknown_conn", unknown_conn},
      {"remote_invalid_stag", remote_invalid_stag},
      {"unauthorized_access", unauthorized_access},
      {"bounds_violation", bounds_violation},
      {"recv_no_buffer", recv_no_buffer},
      {"recv_too_small", recv_too_small},
      {"duplicate_fragment", duplicate_fragment},
      {"stale_fragment", stale_fragment},
      {"duplicate_read_req", duplicate_read_req},
      {"read_resp_unmatched", read_resp_unmatched},
      {"reads_timed_out", reads_timed_out},
      {"imm_notify_dropped", imm_notify_dropped},
      {"data_after_close", data_after_close},
      {"control_dropped", control_dropped},
      {"tx_would_block", tx_would_block},
  };
}

EfficiencyReport compute_efficiency(double bandwidth_gbps, double resource, ResourceKind kind) {
  if (resource <= 0.0) throw std::invalid_argument("compute_efficiency: resource must be > 0");
  EfficiencyReport r;
  r.bandwidth_gbps = bandwidth_gbps;
  r.resource = resource;
  r.resource_kind = kind;
  r.efficiency = bandwidth_gbps / resource;
  return r;
}

nlohmann::json EfficiencyReport::to_json() const {
  return nlohmann::json{
      {"bandwidth_gbps", bandwidth_gbps},
      {"resource", resource},
      {"resource_kind",
       resource_kind == ResourceKind::kWatts ? "watts" : "cpu_seconds_per_second"},
      {"efficiency", efficiency},
  };
}

namespace {

double process_cpu_seconds() {
  rusage ru{};
  getrusage(RUSAGE_SELF, &ru);
  auto tv = [](const timeval& t) { return double(t.tv_sec) + double(t.tv_usec) * 1e-6; };
  return tv(ru.ru_utime) + tv(ru.ru_stime);
}

}  // namespace

CpuSampler::CpuSampler() { restart(); }

void CpuSampler::restart() {
  cpu0_ = process_cpu_seconds();
  wall0_ = std::chrono::steady_clock::now();
}

double CpuSampler::wall_seconds() const {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0_).count();
}

double CpuSampler::seconds_per_second() const {
  double wall = wall_seconds();
  if (wall <= 0.0) return 0.0;
  return (process_cpu_seconds() - cpu0_) / wall;
}

double sample_cpu(std::chrono::milliseconds interval) {
  if (interval.count() <= 0) throw std::invalid_argument("sample_cpu: interval must be > 0");
  CpuSampler s;
  std::this_thread::sleep_for(interval);
  return s.seconds_per_second();
}

}  // namespace ucrdma
