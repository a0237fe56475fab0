#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "nem/errors.hpp"
#include "nem/harness.hpp"

namespace nem {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

void append_line(const std::string& path, const std::string& line) {
  if (path.empty()) return;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to '" + path + "'");
  out << line << '\n';
}

void start_file(const std::string& path, const std::string& header, bool append) {
  if (path.empty()) return;
  if (append) {
    std::ifstream probe(path);
    if (probe && probe.peek() != std::ifstream::traits_type::eof()) return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << header << '\n';
}

}  // namespace

RunLog::RunLog(const std::string& metrics_path, const std::string& timing_path,
               std::string run_id, bool append)
    : run_id_(std::move(run_id)), metrics_path_(metrics_path), timing_path_(timing_path) {
  start_file(metrics_path_, "run_id,phase,epoch,step,metric,value", append);
  start_file(timing_path_, "run_id,phase,epoch,seconds,unix_time,threads", append);
}

void RunLog::metric(const std::string& phase, long epoch, long step, const std::string& name,
                    double value) {
  std::string row = run_id_ + "," + phase + "," + std::to_string(epoch) + "," +
                    std::to_string(step) + "," + name + "," + format_double(value);
  append_line(metrics_path_, row);
  rows_.push_back(std::move(row));
}

void RunLog::timing(const std::string& phase, long epoch, double seconds) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", seconds);
  const auto now = std::chrono::duration_cast<std::chrono::seconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                       .count();
  append_line(timing_path_, run_id_ + "," + phase + "," + std::to_string(epoch) + "," + buf +
                                "," + std::to_string(now) + "," +
                                std::to_string(generation_threads()));
}

bool EarlyStopper::update(std::size_t epoch, double loss) {
  improved_ = loss < best_;
  if (improved_) {
    best_ = loss;
    best_epoch_ = epoch;
    bad_ = 0;
  } else {
    ++bad_;
  }
  return bad_ >= patience_;
}

}  // namespace nem
