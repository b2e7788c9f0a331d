#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tsegcn/tensor.hpp"

namespace tsegcn {

/// One skeleton clip: persons x frames x joints x (x,y,z).
struct SkeletonSequence {
  std::size_t joints = 0;
  std::size_t frames = 0;
  std::size_t persons = 1;
  std::vector<double> coords;  // [persons][frames][joints][3]
  int label = -1;              // -1 = unlabeled

  double& at(std::size_t p, std::size_t t, std::size_t n, std::size_t axis) {
    return coords[((p * frames + t) * joints + n) * 3 + axis];
  }
  double at(std::size_t p, std::size_t t, std::size_t n, std::size_t axis) const {
    return coords[((p * frames + t) * joints + n) * 3 + axis];
  }
};

struct ManifestEntry {
  std::string path;
  int label = -1;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::size_t n_classes = 0;
  std::string split;  // "train" / "test" tag, informational
};

// ---------------------------------------------------------------------------
// Canonical text format
//
//   skeleton v1 joints=<N> persons=<M> frames=<T> label=<int|->
//   x y z            (M*N lines per frame, person-major, frames in order)
//
// `#` starts a comment. Floats are printed with 9 significant digits, which
// round-trips bit-exactly through parse/serialize.
// ---------------------------------------------------------------------------

inline std::string format_coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline std::string serialize_sequence(const SkeletonSequence& seq) {
  std::ostringstream out;
  out << "skeleton v1 joints=" << seq.joints << " persons=" << seq.persons << " frames=" << seq.frames << " label=";
  if (seq.label < 0)
    out << "-";
  else
    out << seq.label;
  out << "\n";
  for (std::size_t t = 0; t < seq.frames; ++t)
    for (std::size_t p = 0; p < seq.persons; ++p)
      for (std::size_t n = 0; n < seq.joints; ++n)
        out << format_coord(seq.at(p, t, n, 0)) << ' ' << format_coord(seq.at(p, t, n, 1)) << ' '
            << format_coord(seq.at(p, t, n, 2)) << "\n";
  return out.str();
}

inline SkeletonSequence parse_sequence_text(std::istream& in, const std::string& origin) {
  auto fail = [&](std::size_t line, const std::string& msg) {
    throw ParseError(origin + ":" + std::to_string(line) + ": " + msg);
  };

  std::string line;
  std::size_t line_no = 0;
  SkeletonSequence seq;
  bool have_header = false;

  auto parse_header = [&](const std::string& text) {
    std::istringstream hs(text);
    std::string word, version;
    hs >> word >> version;
    if (word != "skeleton" || version != "v1") fail(line_no, "expected `skeleton v1` header");
    std::size_t joints = 0, persons = 0, frames = 0;
    bool saw_label = false;
    std::string field;
    while (hs >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) fail(line_no, "malformed header field `" + field + "`");
      const std::string key = field.substr(0, eq), val = field.substr(eq + 1);
      try {
        if (key == "joints")
          joints = std::stoul(val);
        else if (key == "persons")
          persons = std::stoul(val);
        else if (key == "frames")
          frames = std::stoul(val);
        else if (key == "label") {
          saw_label = true;
          seq.label = (val == "-") ? -1 : std::stoi(val);
        } else
          fail(line_no, "unknown header field `" + key + "`");
      } catch (const ParseError&) {
        throw;
      } catch (const std::exception&) {
        fail(line_no, "invalid value in header field `" + field + "`");
      }
    }
    if (joints == 0 || persons == 0 || frames == 0 || !saw_label)
      fail(line_no, "header must carry joints, persons, frames and label");
    seq.joints = joints;
    seq.persons = persons;
    seq.frames = frames;
    seq.coords.assign(persons * frames * joints * 3, 0.0);
  };

  std::size_t row = 0;  // coordinate rows consumed
  const auto row_target = [&] { return seq.persons * seq.frames * seq.joints; };
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    // skip blank lines
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (!have_header) {
      parse_header(line);
      have_header = true;
      continue;
    }
    if (row >= row_target()) fail(line_no, "extra coordinate row after frame data ended");
    std::istringstream ls(line);
    double x, y, z;
    if (!(ls >> x >> y >> z)) fail(line_no, "expected `x y z` coordinates");
    std::string extra;
    if (ls >> extra) fail(line_no, "unexpected token `" + extra + "` after coordinates");
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) fail(line_no, "non-finite coordinate");
    const std::size_t t = row / (seq.persons * seq.joints);
    const std::size_t rem = row % (seq.persons * seq.joints);
    const std::size_t p = rem / seq.joints;
    const std::size_t n = rem % seq.joints;
    seq.at(p, t, n, 0) = x;
    seq.at(p, t, n, 1) = y;
    seq.at(p, t, n, 2) = z;
    ++row;
  }
  if (!have_header) throw ParseError(origin + ": missing `skeleton v1` header");
  if (row < row_target()) {
    const std::size_t frame = row / (seq.persons * seq.joints);
    throw ParseError(origin + ":" + std::to_string(line_no) + ": truncated frame " + std::to_string(frame) + " (" +
                     std::to_string(row) + " of " + std::to_string(row_target()) + " coordinate rows)");
  }
  return seq;
}

inline SkeletonSequence parse_sequence(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open sequence file: " + path);
  return parse_sequence_text(in, path);
}

inline void write_sequence(const SkeletonSequence& seq, const std::string& path) {
  std::ofstream out(path, std::ios::binary);  // binary: keep exact \n endings
  if (!out) throw Error("cannot open sequence file for writing: " + path);
  out << serialize_sequence(seq);
  if (!out) throw Error("sequence write failed: " + path);
}

// ---------------------------------------------------------------------------
// Resampling and batching
// ---------------------------------------------------------------------------

/// Uniform linear resampling along time to exactly t_target frames.
/// t_target == frames is the identity.
inline SkeletonSequence resample(const SkeletonSequence& seq, std::size_t t_target) {
  if (t_target < 1) throw ConfigError("resample: t_target must be >= 1");
  SkeletonSequence out;
  out.joints = seq.joints;
  out.persons = seq.persons;
  out.frames = t_target;
  out.label = seq.label;
  out.coords.assign(seq.persons * t_target * seq.joints * 3, 0.0);
  const double scale =
      (t_target == 1) ? 0.0 : static_cast<double>(seq.frames - 1) / static_cast<double>(t_target - 1);
  for (std::size_t t = 0; t < t_target; ++t) {
    const double pos = static_cast<double>(t) * scale;
    std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    if (lo + 1 >= seq.frames) lo = (seq.frames > 1) ? seq.frames - 2 : 0;
    const std::size_t hi = (seq.frames > 1) ? lo + 1 : 0;
    const double f = pos - static_cast<double>(lo);
    for (std::size_t p = 0; p < seq.persons; ++p)
      for (std::size_t n = 0; n < seq.joints; ++n)
        for (std::size_t a = 0; a < 3; ++a)
          out.at(p, t, n, a) = (1.0 - f) * seq.at(p, lo, n, a) + f * seq.at(p, hi, n, a);
  }
  return out;
}

/// Fold persons into the batch axis and center each sequence on the mean
/// joint position of its first frame (translation-invariance preprocessing).
/// Output: [sum persons, N, t_target, 3]; per-entry labels alongside.
inline Tensor to_batch(const std::vector<SkeletonSequence>& seqs, std::size_t t_target,
                       std::vector<std::size_t>* out_labels = nullptr,
                       std::vector<std::size_t>* out_sequence_of_row = nullptr) {
  if (seqs.empty()) throw ConfigError("to_batch: empty sequence list");
  const std::size_t N = seqs[0].joints;
  std::size_t rows = 0;
  for (const auto& s : seqs) {
    if (s.joints != N)
      throw DimensionError("to_batch: joint count mismatch (" + std::to_string(s.joints) + " vs " +
                           std::to_string(N) + ")");
    rows += s.persons;
  }
  Tensor out({rows, N, t_target, 3});
  if (out_labels) out_labels->clear();
  if (out_sequence_of_row) out_sequence_of_row->clear();
  std::size_t row = 0;
  for (std::size_t si = 0; si < seqs.size(); ++si) {
    const SkeletonSequence rs = resample(seqs[si], t_target);
    // first-frame mean over all persons and joints
    double cx = 0.0, cy = 0.0, cz = 0.0;
    const double inv = 1.0 / static_cast<double>(rs.persons * N);
    for (std::size_t p = 0; p < rs.persons; ++p)
      for (std::size_t n = 0; n < N; ++n) {
        cx += rs.at(p, 0, n, 0) * inv;
        cy += rs.at(p, 0, n, 1) * inv;
        cz += rs.at(p, 0, n, 2) * inv;
      }
    for (std::size_t p = 0; p < rs.persons; ++p, ++row) {
      for (std::size_t t = 0; t < t_target; ++t)
        for (std::size_t n = 0; n < N; ++n) {
          out.at(row, n, t, 0) = rs.at(p, t, n, 0) - cx;
          out.at(row, n, t, 1) = rs.at(p, t, n, 1) - cy;
          out.at(row, n, t, 2) = rs.at(p, t, n, 2) - cz;
        }
      if (out_labels) out_labels->push_back(static_cast<std::size_t>(std::max(rs.label, 0)));
      if (out_sequence_of_row) out_sequence_of_row->push_back(si);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest (JSON lines: {"path": ..., "label": ...})
// ---------------------------------------------------------------------------

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open manifest for writing: " + path);
  for (const auto& e : m.entries) {
    out << "{\"path\": \"" << e.path << "\", \"label\": " << e.label << "}\n";
  }
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open manifest: " + path);
  DatasetManifest m;
  std::string line;
  std::size_t line_no = 0;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    // minimal JSONL reader for the two known fields
    const auto ppos = line.find("\"path\"");
    const auto lpos = line.find("\"label\"");
    if (ppos == std::string::npos || lpos == std::string::npos)
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected {\"path\": ..., \"label\": ...}");
    const auto q1 = line.find('"', line.find(':', ppos));
    const auto q2 = line.find('"', q1 + 1);
    if (q1 == std::string::npos || q2 == std::string::npos)
      throw ParseError(path + ":" + std::to_string(line_no) + ": malformed path string");
    ManifestEntry e;
    e.path = line.substr(q1 + 1, q2 - q1 - 1);
    try {
      e.label = std::stoi(line.substr(line.find(':', lpos) + 1));
    } catch (const std::exception&) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": malformed label");
    }
    max_label = std::max(max_label, e.label);
    m.entries.push_back(std::move(e));
  }
  m.n_classes = static_cast<std::size_t>(max_label + 1);
  for (const auto& e : m.entries)
    if (e.label < 0) throw ParseError(path + ": entry with negative label: " + e.path);
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic dataset on the 9-joint toy skeleton
// ---------------------------------------------------------------------------

struct SynthSpec {
  std::size_t samples_per_class = 32;
  std::uint64_t seed = 0;
  std::size_t frames = 48;
  double jitter = 0.02;
  static constexpr std::size_t n_classes = 4;
};

struct SynthMotionParams {
  double amplitude = 0.25;
  double cycles = 2.0;
  double phase = 0.0;
};

/// Class semantics on the toy skeleton (joints: 4 = left hand, 6 = right
/// hand; shoulders 3/5 follow their hands at 30%):
///   0 both hands oscillate in phase       1 hands oscillate in anti-phase
///   2 only the left hand oscillates       3 only the right hand oscillates
inline SkeletonSequence synth_clean_sample(std::size_t klass, const SynthMotionParams& mp, std::size_t frames) {
  static const double base[9][3] = {
      {0.0, 0.0, 0.0},    {0.0, 0.6, 0.0},   {0.0, 0.9, 0.0},   {-0.35, 0.55, 0.0}, {-0.65, 0.25, 0.0},
      {0.35, 0.55, 0.0},  {0.65, 0.25, 0.0}, {-0.2, -0.9, 0.0}, {0.2, -0.9, 0.0}};
  SkeletonSequence seq;
  seq.joints = 9;
  seq.persons = 1;
  seq.frames = frames;
  seq.label = static_cast<int>(klass);
  seq.coords.assign(frames * 9 * 3, 0.0);
  const double tau = 6.283185307179586476925286766559;
  for (std::size_t t = 0; t < frames; ++t) {
    const double arg = tau * mp.cycles * static_cast<double>(t) / static_cast<double>(frames) + mp.phase;
    double left = 0.0, right = 0.0;
    switch (klass) {
      case 0:
        left = right = mp.amplitude * std::sin(arg);
        break;
      case 1:
        left = mp.amplitude * std::sin(arg);
        right = -left;
        break;
      case 2:
        left = mp.amplitude * std::sin(arg);
        break;
      case 3:
        right = mp.amplitude * std::sin(arg);
        break;
      default:
        throw ConfigError("synth class must be in [0, 4)");
    }
    for (std::size_t n = 0; n < 9; ++n)
      for (std::size_t a = 0; a < 3; ++a) seq.at(0, t, n, a) = base[n][a];
    seq.at(0, t, 4, 1) += left;   // left hand, vertical
    seq.at(0, t, 4, 2) += 0.4 * left;
    seq.at(0, t, 3, 1) += 0.3 * left;
    seq.at(0, t, 6, 1) += right;  // right hand
    seq.at(0, t, 6, 2) += 0.4 * right;
    seq.at(0, t, 5, 1) += 0.3 * right;
  }
  return seq;
}

/// Mirror a sample across the sagittal plane: negate x and swap the
/// left/right joint pairs (3,5), (4,6), (7,8).
inline SkeletonSequence mirror_sample(const SkeletonSequence& seq) {
  static const std::size_t mirror[9] = {0, 1, 2, 5, 6, 3, 4, 8, 7};
  SkeletonSequence out = seq;
  for (std::size_t p = 0; p < seq.persons; ++p)
    for (std::size_t t = 0; t < seq.frames; ++t)
      for (std::size_t n = 0; n < 9; ++n) {
        out.at(p, t, mirror[n], 0) = -seq.at(p, t, n, 0);
        out.at(p, t, mirror[n], 1) = seq.at(p, t, n, 1);
        out.at(p, t, mirror[n], 2) = seq.at(p, t, n, 2);
      }
  return out;
}

inline SynthMotionParams synth_draw_params(Rng& rng) {
  SynthMotionParams mp;
  mp.amplitude = rng.uniform(0.18, 0.3);
  mp.cycles = (rng.uniform_int(2) == 0) ? 2.0 : 3.0;
  mp.phase = rng.uniform(0.0, 6.283185307179586476925286766559);
  return mp;
}

/// Deterministic labeled dataset: 4 classes, `samples_per_class` files each,
/// written under dir; returns the manifest (also written as manifest.jsonl).
/// The split tag is folded into the seed so one seed yields distinct train
/// and test draws.
inline DatasetManifest synth_dataset(const SynthSpec& spec, const std::string& dir, const std::string& split = "train") {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::uint64_t seed = spec.seed;
  for (const char c : split) seed = (seed ^ static_cast<std::uint64_t>(c)) * 0x100000001B3ULL;  // FNV-1a fold
  Rng rng(seed);
  DatasetManifest manifest;
  manifest.n_classes = SynthSpec::n_classes;
  manifest.split = split;
  for (std::size_t klass = 0; klass < SynthSpec::n_classes; ++klass) {
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      const SynthMotionParams mp = synth_draw_params(rng);
      SkeletonSequence seq = synth_clean_sample(klass, mp, spec.frames);
      for (double& v : seq.coords) v += spec.jitter * rng.normal();
      char name[64];
      std::snprintf(name, sizeof(name), "%s_c%zu_s%03zu.skl", split.c_str(), klass, s);
      const std::string path = (fs::path(dir) / name).string();
      write_sequence(seq, path);
      manifest.entries.push_back({path, static_cast<int>(klass)});
    }
  }
  write_manifest(manifest, (fs::path(dir) / (split + "_manifest.jsonl")).string());
  return manifest;
}

}  // namespace tsegcn
