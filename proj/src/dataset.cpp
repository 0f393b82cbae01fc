#include "cosod/dataset.hpp"

#include <algorithm>
#include <map>

#include "cosod/imageio.hpp"

namespace cosod {

namespace fs = std::filesystem;

namespace {

std::map<std::string, fs::path> files_with_extension(const fs::path& dir, const std::string& ext) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out[e.path().stem().string()] = e.path();
  return out;
}

std::vector<DatasetItem> pair_items(const fs::path& dir, std::vector<std::string>& errors) {
  const auto images = files_with_extension(dir / "img", ".ppm");
  const auto masks = files_with_extension(dir / "gt", ".pgm");
  std::vector<DatasetItem> items;
  for (const auto& [stem, path] : images) {
    auto it = masks.find(stem);
    if (it == masks.end()) {
      errors.push_back("missing gt for " + path.string());
      continue;
    }
    items.push_back({stem, path, it->second});
  }
  for (const auto& [stem, path] : masks)
    if (!images.count(stem)) errors.push_back("missing image for " + path.string());
  return items;
}

}  // namespace

DatasetIndex dataset_layout(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  DatasetIndex index;
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && e.path().filename().string().rfind("group_", 0) == 0) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    GroupEntry g{dir.filename().string(), dir, pair_items(dir, index.errors)};
    if (g.items.size() < 2) index.errors.push_back(g.id + ": fewer than two paired images");
    index.groups.push_back(std::move(g));
  }
  if (fs::is_directory(root / "aux")) index.aux = pair_items(root / "aux", index.errors);
  return index;
}

std::vector<DatasetItem> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<DatasetItem> out;
  for (const auto& [stem, path] : files_with_extension(dir, ".ppm")) out.push_back({stem, path, {}});
  return out;
}

template <typename Scalar>
LoadedDataset<Scalar> load_dataset(const DatasetIndex& index) {
  if (!index.ok()) throw ParseError("dataset has " + std::to_string(index.errors.size()) + " errors, first: " + index.errors.front());
  LoadedDataset<Scalar> data;
  for (const auto& g : index.groups) {
    ImageGroup<Scalar> group;
    group.group_id = g.id;
    for (const auto& item : g.items) {
      group.images.push_back(image_tensor<Scalar>(read_pnm(item.image)));
      group.gt.push_back(mask_from_gray<Scalar>(read_pnm(item.gt)));
    }
    group.validate();
    data.groups.push_back(std::move(group));
  }
  for (const auto& item : index.aux) {
    data.aux.images.push_back(image_tensor<Scalar>(read_pnm(item.image)));
    data.aux.gt.push_back(mask_from_gray<Scalar>(read_pnm(item.gt)));
  }
  return data;
}

template <typename Scalar>
ImageGroup<Scalar> to_image_group(const SynthGroup& group) {
  ImageGroup<Scalar> out;
  out.group_id = group_dir_name(group.index);
  for (const auto& item : group.images) {
    out.images.push_back(image_tensor<Scalar>(item.image));
    out.gt.push_back(mask_from_gray<Scalar>(item.mask));
  }
  return out;
}

template <typename Scalar>
LoadedDataset<Scalar> synthesize(const SynthSpec& spec, bool with_aux) {
  LoadedDataset<Scalar> data;
  for (int g = 0; g < spec.n_groups; ++g) data.groups.push_back(to_image_group<Scalar>(synth_group(spec, g)));
  if (with_aux)
    for (int k = 0; k < spec.n_aux; ++k) {
      const SynthImage item = synth_aux(spec, k);
      data.aux.images.push_back(image_tensor<Scalar>(item.image));
      data.aux.gt.push_back(mask_from_gray<Scalar>(item.mask));
    }
  return data;
}

#define COSOD_INSTANTIATE(S)                                                 \
  template LoadedDataset<S> load_dataset<S>(const DatasetIndex&);            \
  template ImageGroup<S> to_image_group<S>(const SynthGroup&);               \
  template LoadedDataset<S> synthesize<S>(const SynthSpec&, bool);

COSOD_INSTANTIATE(float)
COSOD_INSTANTIATE(double)

#undef COSOD_INSTANTIATE

}  // namespace cosod
