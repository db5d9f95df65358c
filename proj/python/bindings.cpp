// Python access to the core: registry, wire frames, trajectories, experts,
// guidance and the evaluation statistics.

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sima/agent.hpp"
#include "sima/datapipe.hpp"
#include "sima/evalharness.hpp"
#include "sima/server.hpp"
#include "sima/worlds.hpp"

namespace py = pybind11;
using namespace sima;

namespace {

py::bytes to_bytes(const std::vector<std::uint8_t>& v) {
  return py::bytes(reinterpret_cast<const char*>(v.data()), v.size());
}

std::vector<std::uint8_t> from_bytes(const py::bytes& b) {
  std::string s = b;
  return {s.begin(), s.end()};
}

net::Role parse_role(const std::string& name) {
  auto r = net::role_from_name(name);
  if (!r) throw ProtocolError("unknown role '" + name + "'");
  return *r;
}

py::array_t<std::uint8_t> frame_array(const Frame& f) {
  py::array_t<std::uint8_t> out({kFrameSize, kFrameSize, 2});
  auto m = out.mutable_unchecked<3>();
  for (int r = 0; r < kFrameSize; ++r) {
    for (int c = 0; c < kFrameSize; ++c) {
      m(r, c, 0) = f.at(r, c).symbol;
      m(r, c, 1) = f.at(r, c).color;
    }
  }
  return out;
}

py::dict message_dict(const net::Message& msg) {
  py::dict d;
  d["type"] = std::string(net::message_name(msg));
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, net::Hello>) {
          d["version"] = m.version;
          d["role"] = std::string(net::role_name(m.role));
          d["name"] = m.client_name;
        } else if constexpr (std::is_same_v<T, net::Instruction> || std::is_same_v<T, net::Interrupt>) {
          d["text"] = m.text;
        } else if constexpr (std::is_same_v<T, Observation>) {
          d["tick"] = m.tick;
          d["frame_hash"] = frame_hash(m.frame);
        } else if constexpr (std::is_same_v<T, net::EndEpisode>) {
          d["reason"] = std::string(net::end_reason_name(m.reason));
          d["tick"] = m.tick;
        } else if constexpr (std::is_same_v<T, net::Reset>) {
          d["task_id"] = m.task_id;
          d["seed"] = m.seed;
        }
      },
      msg);
  return d;
}

agent::PolicyLogits logits_from(const Eigen::MatrixXd& m) {
  if (m.cols() != agent::kStepWidth) {
    throw Error("logits need " + std::to_string(agent::kStepWidth) + " columns per chunk step");
  }
  agent::PolicyLogits l(static_cast<int>(m.rows()));
  for (int s = 0; s < l.chunk_len; ++s) l.step(s) = m.row(s).transpose();
  return l;
}

}  // namespace

PYBIND11_MODULE(_sima, m) {
  m.doc() = "Core bindings for the instructable-agent sandbox";

  // Translators run newest first, so the base goes in before its subclasses.
  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<DecodeError>(m, "DecodeError", base);
  py::register_exception<ProtocolError>(m, "ProtocolError", base);
  py::register_exception<SpecError>(m, "SpecError", base);
  py::register_exception<ConfigError>(m, "ConfigError", base);

  m.attr("PROTOCOL_VERSION") = net::kProtocolVersion;
  m.attr("CHUNK_LEN") = net::kChunkLen;
  m.attr("STEP_WIDTH") = agent::kStepWidth;

  m.def(
      "tasks_jsonl",
      [](std::optional<std::string> world) {
        std::optional<WorldKind> w;
        if (world) {
          w = world_from_name(*world);
          if (!w) throw SpecError("unknown world '" + *world + "'");
        }
        std::vector<std::string> out;
        for (const auto& t : worlds::registry_list(w)) out.push_back(worlds::task_to_json(t));
        return out;
      },
      py::arg("world") = py::none());

  m.def(
      "initial_frame",
      [](const std::string& task_id, std::uint64_t seed) {
        return frame_array(observe(instantiate_task(worlds::find_task(task_id), seed)).frame);
      },
      py::arg("task_id"), py::arg("seed") = 0, "Tick-0 frame as a (16, 16, 2) array of (symbol, color).");

  m.def("encode_hello", [](const std::string& role, const std::string& name) {
    return to_bytes(net::encode(net::Hello{net::kProtocolVersion, parse_role(role), name}));
  });
  m.def("encode_reset", [](const std::string& task_id, std::uint64_t seed) {
    return to_bytes(net::encode(net::Reset{task_id, seed}));
  });
  m.def("encode_instruction", [](const std::string& text) { return to_bytes(net::encode(net::Instruction{text})); });
  m.def("encode_interrupt", [](const std::string& text) { return to_bytes(net::encode(net::Interrupt{text})); });
  m.def(
      "split_frames",
      [](const py::bytes& stream) {
        py::list out;
        for (const auto& msg : net::split_frames(from_bytes(stream))) out.append(message_dict(msg));
        return out;
      },
      "Decodes a concatenation of wire frames into summary dicts.");

  m.def(
      "replay",
      [](const std::string& path) { return net::replay(net::read_trajectory(path)); },
      "Frame hashes from re-simulating a recorded trajectory; raises on divergence.");
  m.def("trajectory_info", [](const std::string& path) {
    auto t = net::read_trajectory(path);
    py::dict d;
    d["task_id"] = t.header.task_id;
    d["seed"] = t.header.seed;
    d["world"] = std::string(world_name(t.header.world));
    d["role"] = std::string(net::role_name(t.header.role));
    d["ticks"] = t.ticks();
    d["end"] = t.end ? py::cast(std::string(net::end_reason_name(t.end->reason))) : py::none();
    return d;
  });

  m.def(
      "run_expert",
      [](const std::string& task_id, std::uint64_t seed) {
        eval::ClientFactory expert = [](const TaskSpec& task, const WorldState& initial) -> std::unique_ptr<net::Client> {
          return std::make_unique<data::ExpertClient>(task, initial);
        };
        auto r = eval::run_episode(expert, worlds::find_task(task_id), seed);
        return py::make_tuple(std::string(status_name(r.outcome.status)), r.outcome.ticks_used);
      },
      py::arg("task_id"), py::arg("seed") = 0, "Scripted expert episode; returns (status, ticks).");

  m.def(
      "cfg_combine",
      [](const Eigen::MatrixXd& cond, const Eigen::MatrixXd& uncond, double lambda) {
        auto out = agent::cfg_combine(logits_from(cond), logits_from(uncond), lambda);
        Eigen::MatrixXd r(out.chunk_len, agent::kStepWidth);
        for (int s = 0; s < out.chunk_len; ++s) r.row(s) = out.step(s).transpose();
        return r;
      },
      py::arg("cond"), py::arg("uncond"), py::arg("scale"));

  m.def("success_rate", [](std::size_t k, std::size_t n) {
    auto r = eval::success_rate(k, n);
    return py::make_tuple(r.rate, r.ci95);
  });
  m.def(
      "permutation_test",
      [](const std::vector<double>& a, const std::vector<double>& b, std::uint64_t resamples, std::uint64_t seed,
         bool paired) {
        auto r = eval::permutation_test(a, b, resamples, seed,
                                        paired ? eval::PermutationMode::kPaired : eval::PermutationMode::kPooled);
        py::dict d;
        d["p"] = r.p;
        d["statistic"] = r.statistic;
        d["exhaustive"] = r.exhaustive;
        d["resamples"] = r.resamples;
        return d;
      },
      py::arg("a"), py::arg("b"), py::arg("resamples") = 10000, py::arg("seed") = 0, py::arg("paired") = false);
  m.def(
      "aggregate_judgments", [](const std::string& jsonl) { return eval::aggregate_judgments(eval::parse_judgments(jsonl)); },
      "Strict-majority verdict over judgment upload lines.");
  m.def("parse_annotations", [](const std::string& jsonl) {
    py::list out;
    for (const auto& s : data::parse_annotations(jsonl)) {
      py::dict d;
      d["trajectory_id"] = s.trajectory_id;
      d["t0"] = s.t0;
      d["t1"] = s.t1;
      d["instruction"] = s.instruction;
      d["source"] = std::string(net::segment_source_name(s.source));
      d["annotator_id"] = s.annotator_id;
      out.append(d);
    }
    return out;
  });
}
