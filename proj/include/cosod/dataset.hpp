#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cosod/model.hpp"
#include "cosod/synth.hpp"

namespace cosod {

struct DatasetItem {
  std::string stem;
  std::filesystem::path image;
  std::filesystem::path gt;
};

struct GroupEntry {
  std::string id;  // directory name, e.g. group_0003
  std::filesystem::path dir;
  std::vector<DatasetItem> items;
};

struct DatasetIndex {
  std::vector<GroupEntry> groups;  // sorted by id
  std::vector<DatasetItem> aux;    // sorted by stem
  // One line per problem: images without masks, masks without images.
  std::vector<std::string> errors;

  bool ok() const { return errors.empty(); }
};

// Scans root/group_*/{img,gt} and root/aux/{img,gt}. Items are paired by stem;
// unpaired files are reported, never silently dropped.
DatasetIndex dataset_layout(const std::filesystem::path& root);

// Image files (*.ppm) directly inside `dir`, sorted by stem.
std::vector<DatasetItem> list_images(const std::filesystem::path& dir);

template <typename Scalar>
struct LoadedDataset {
  std::vector<ImageGroup<Scalar>> groups;
  AuxBatch<Scalar> aux;
};

// Reads a validated index into memory. Throws ParseError if the index has
// errors.
template <typename Scalar>
LoadedDataset<Scalar> load_dataset(const DatasetIndex& index);

// Same tensors load_dataset would produce from the written files.
template <typename Scalar>
ImageGroup<Scalar> to_image_group(const SynthGroup& group);

// Generates the split in memory (groups, then aux when `with_aux`).
template <typename Scalar>
LoadedDataset<Scalar> synthesize(const SynthSpec& spec, bool with_aux = true);

}  // namespace cosod
