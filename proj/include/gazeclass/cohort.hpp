#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gazeclass/hfm.hpp"
#include "gazeclass/image_io.hpp"

namespace gazeclass {

// Class index convention: TD = 0, ASD = 1 (the positive class).
enum class Group : int { td = 0, asd = 1 };

std::string group_name(Group g);
Group parse_group(const std::string& s);

struct SubjectInfo {
  std::string id;
  Group label = Group::td;
};

// Stimuli plus raw gaze, as stored in a dataset directory.
struct RawCohort {
  std::size_t width = 0;
  std::size_t height = 0;
  double sample_rate_hz = 300.0;
  std::vector<std::string> image_ids;
  std::vector<StimulusImage> images;
  std::vector<SubjectInfo> subjects;
  std::vector<GazeSeries> series;
};

struct SubjectRecord {
  std::string id;
  Group label = Group::td;
  std::vector<FixationMap> maps;  // one per image, canonical image order
};

struct CohortDataset {
  std::vector<std::string> image_ids;
  std::vector<StimulusImage> images;
  std::vector<SubjectRecord> subjects;

  std::size_t n_images() const { return images.size(); }
};

struct SynthParams {
  std::size_t n_per_group = 20;
  std::size_t n_images = 30;
  std::size_t width = 320;
  std::size_t height = 240;
  std::size_t max_objects = 3;
  double object_radius_frac = 0.07;
  // Probability that a fixation lands on the image center instead of an object.
  double center_bias_td = 0.0;
  double center_bias_asd = 0.6;
  double object_jitter_px = 6.0;
  double center_jitter_px = 18.0;
  double sample_jitter_px = 1.5;
  double viewing_ms = 1500.0;
  double fixation_ms = 300.0;
  double sample_rate_hz = 300.0;
  // Images on which the groups differ; empty means every image. On the
  // remaining images both groups use center_bias_td.
  std::vector<std::size_t> signal_images;
  std::uint64_t seed = 1;

  void validate() const;
};

RawCohort synth_gaze(const SynthParams& params);

// Builds one FixationMap per (subject, image). Every subject needs a series
// for every image.
CohortDataset assemble_cohort(const RawCohort& raw, const HfmParams& hfm);

CohortDataset synth_cohort(const SynthParams& params, const HfmParams& hfm);

// images/<id>.ppm, gaze.csv, manifest.json
void write_dataset(const std::filesystem::path& dir, const RawCohort& raw);
RawCohort read_dataset(const std::filesystem::path& dir);

}  // namespace gazeclass
