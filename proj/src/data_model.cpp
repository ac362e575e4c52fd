#include "fairseg/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fairseg/error.hpp"
#include "fairseg/image_io.hpp"
#include "fairseg/log.hpp"
#include "fairseg/rng.hpp"

namespace fairseg::data {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) {
    fields.push_back(field);
  }
  if (!line.empty() && line.back() == ',') {
    fields.emplace_back();
  }
  return fields;
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') {
    s.pop_back();
  }
  return s;
}

}  // namespace

int64_t AttributeSpec::subgroup_count() const {
  if (kind == AttributeKind::Categorical) {
    return static_cast<int64_t>(categories.size());
  }
  return static_cast<int64_t>(bins.size()) - 1;
}

std::vector<std::string> AttributeSpec::subgroup_labels() const {
  if (kind == AttributeKind::Categorical) {
    return categories;
  }
  std::vector<std::string> labels;
  for (size_t i = 0; i + 1 < bins.size(); ++i) {
    std::ostringstream os;
    os << "[" << bins[i] << "," << bins[i + 1] << (i + 2 == bins.size() ? "]" : ")");
    labels.push_back(os.str());
  }
  return labels;
}

void AttributeSpec::validate() const {
  if (name.empty()) {
    throw ConfigError("attribute spec: name is empty");
  }
  if (kind == AttributeKind::Categorical) {
    if (categories.empty()) {
      throw ConfigError("attribute spec '" + name + "': no categories");
    }
    for (size_t i = 0; i < categories.size(); ++i) {
      for (size_t j = i + 1; j < categories.size(); ++j) {
        if (categories[i] == categories[j]) {
          throw ConfigError("attribute spec '" + name + "': duplicate category '" +
                            categories[i] + "'");
        }
      }
    }
  } else {
    if (bins.size() < 2) {
      throw ConfigError("attribute spec '" + name + "': needs at least 2 bin edges");
    }
    for (size_t i = 0; i + 1 < bins.size(); ++i) {
      if (!(bins[i] < bins[i + 1])) {
        throw ConfigError("attribute spec '" + name + "': bin edges must be strictly increasing");
      }
    }
  }
}

AttributeSpec AttributeSpec::sex() {
  AttributeSpec s;
  s.name = "sex";
  s.kind = AttributeKind::Categorical;
  s.categories = {"F", "M"};
  return s;
}

AttributeSpec AttributeSpec::age() {
  AttributeSpec s;
  s.name = "age";
  s.kind = AttributeKind::BinnedNumeric;
  s.bins = {0.0, 20.0, 40.0, 60.0, 80.0, 100.0};
  return s;
}

int64_t bin_attribute(double value, const AttributeSpec& spec) {
  spec.validate();
  if (spec.kind != AttributeKind::BinnedNumeric) {
    throw ConfigError("bin_attribute: spec '" + spec.name + "' is not binned-numeric");
  }
  if (!std::isfinite(value) || value < spec.bins.front() || value > spec.bins.back()) {
    std::ostringstream os;
    os << "attribute '" << spec.name << "': value " << value << " outside [" << spec.bins.front()
       << "," << spec.bins.back() << "]";
    throw DataError(os.str());
  }
  const auto n_bins = static_cast<int64_t>(spec.bins.size()) - 1;
  for (int64_t k = 0; k < n_bins; ++k) {
    if (value < spec.bins[k + 1]) {
      return k;
    }
  }
  return n_bins - 1;  // value == last edge; final bin is closed
}

std::vector<int64_t> SegDataset::subgroup_sizes() const {
  std::vector<int64_t> sizes(subgroup_count, 0);
  for (const auto& s : samples) {
    sizes.at(s.attribute) += 1;
  }
  return sizes;
}

void SegDataset::validate() const {
  if (subgroup_count < 1) {
    throw DataError("dataset: subgroup_count must be >= 1");
  }
  if (class_count < 2) {
    throw DataError("dataset: class_count must be >= 2");
  }
  if (static_cast<int64_t>(subgroup_labels.size()) != subgroup_count) {
    throw DataError("dataset: subgroup label count does not match subgroup_count");
  }
  for (const auto& s : samples) {
    if (s.attribute < 0 || s.attribute >= subgroup_count) {
      throw DataError("dataset: sample " + s.id + " has out-of-range subgroup id");
    }
    if (s.image.dim() != 3 || s.mask.dim() != 2) {
      throw DataError("dataset: sample " + s.id + " has malformed tensors");
    }
    if (s.image.size(1) != s.mask.size(0) || s.image.size(2) != s.mask.size(1)) {
      throw DataError("dataset: sample " + s.id + " image/mask spatial dims differ");
    }
  }
}

SegDataset load_dataset(const std::filesystem::path& root, const AttributeSpec& spec,
                        const LoadOptions& options) {
  spec.validate();
  if (options.resolution < 1) {
    throw ConfigError("load_dataset: resolution must be positive");
  }
  const auto csv_path = root / "metadata.csv";
  std::ifstream csv(csv_path);
  if (!csv) {
    throw IoError("missing metadata.csv at " + csv_path.string());
  }

  std::string line;
  if (!std::getline(csv, line)) {
    throw DataError("metadata.csv is empty at " + csv_path.string());
  }
  const auto header = split_csv_line(strip_cr(line));
  int id_col = -1, attr_col = -1;
  for (size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "id") id_col = static_cast<int>(i);
    if (header[i] == spec.name) attr_col = static_cast<int>(i);
  }
  if (id_col < 0) {
    throw DataError("metadata.csv has no 'id' column");
  }
  if (attr_col < 0) {
    throw DataError("metadata.csv has no '" + spec.name + "' column");
  }

  struct Row {
    std::string id, raw;
  };
  std::vector<Row> rows;
  while (std::getline(csv, line)) {
    line = strip_cr(line);
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw DataError("metadata.csv row has " + std::to_string(fields.size()) +
                      " fields, header has " + std::to_string(header.size()) + ": " + line);
    }
    rows.push_back({fields[id_col], fields[attr_col]});
  }
  if (rows.empty()) {
    throw DataError("metadata.csv has no data rows");
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.id < b.id; });
  for (size_t i = 0; i + 1 < rows.size(); ++i) {
    if (rows[i].id == rows[i + 1].id) {
      throw DataError("metadata.csv has duplicate id '" + rows[i].id + "'");
    }
  }

  // Every image on disk must be described by metadata; orphans are an error.
  std::unordered_set<std::string> known;
  for (const auto& r : rows) known.insert(r.id);
  const auto images_dir = root / "images";
  if (!std::filesystem::is_directory(images_dir)) {
    throw IoError("missing images directory at " + images_dir.string());
  }
  for (const auto& entry : std::filesystem::directory_iterator(images_dir)) {
    if (!entry.is_regular_file()) continue;
    const auto stem = entry.path().stem().string();
    if (!known.count(stem)) {
      throw DataError("image '" + stem + "' has no metadata row");
    }
  }

  SegDataset ds;
  ds.attribute_name = spec.name;
  ds.subgroup_count = spec.subgroup_count();
  ds.subgroup_labels = spec.subgroup_labels();

  int64_t max_class = 0;
  for (const auto& row : rows) {
    const auto img_path = images_dir / (row.id + ".png");
    const auto mask_path = root / "masks" / (row.id + ".png");
    if (!std::filesystem::exists(img_path)) {
      throw DataError("missing image for id '" + row.id + "' at " + img_path.string());
    }
    if (!std::filesystem::exists(mask_path)) {
      throw DataError("missing mask for image '" + row.id + "' at " + mask_path.string());
    }

    Sample s;
    s.id = row.id;
    s.raw_attribute = row.raw;
    if (spec.kind == AttributeKind::Categorical) {
      auto it = std::find(spec.categories.begin(), spec.categories.end(), row.raw);
      if (it == spec.categories.end()) {
        throw DataError("id '" + row.id + "': attribute '" + spec.name + "' value '" + row.raw +
                        "' is not a known category");
      }
      s.attribute = std::distance(spec.categories.begin(), it);
    } else {
      try {
        size_t pos = 0;
        const double v = std::stod(row.raw, &pos);
        if (pos != row.raw.size()) throw std::invalid_argument(row.raw);
        s.attribute = bin_attribute(v, spec);
      } catch (const DataError&) {
        throw;
      } catch (const std::exception&) {
        throw DataError("id '" + row.id + "': attribute '" + spec.name + "' value '" + row.raw +
                        "' is not numeric");
      }
    }
    s.image = read_image_png(img_path, options.resolution);
    // Standardize per image so absolute brightness and global contrast carry
    // no information downstream; what remains of an acquisition handicap is
    // its relative noise level, not a trivially separable intensity scale.
    {
      const auto mean = s.image.mean();
      const auto stdev = s.image.std(/*unbiased=*/false).clamp_min(1e-6);
      s.image = (s.image - mean) / stdev;
    }
    s.mask = read_mask_png(mask_path, options.resolution);
    max_class = std::max(max_class, s.mask.max().item<int64_t>());
    ds.samples.push_back(std::move(s));
  }

  if (options.class_count > 0) {
    ds.class_count = options.class_count;
    if (max_class >= ds.class_count) {
      throw DataError("mask contains class id " + std::to_string(max_class) +
                      " >= declared class count " + std::to_string(ds.class_count));
    }
  } else {
    ds.class_count = std::max<int64_t>(2, max_class + 1);
    if (ds.class_count > 16) {
      throw DataError("inferred class count " + std::to_string(ds.class_count) +
                      " is implausibly large; are the masks scaled to [0,255]?");
    }
  }
  ds.validate();
  const auto sizes = ds.subgroup_sizes();
  for (int64_t k = 0; k < ds.subgroup_count; ++k) {
    if (sizes[k] == 0) {
      log_warn("dataset at " + root.string() + ": subgroup " + std::to_string(k) + " (" +
               ds.subgroup_labels[k] + ") is empty");
    }
  }
  return ds;
}

std::pair<SegDataset, SegDataset> split_dataset(const SegDataset& dataset, double train_ratio,
                                                uint64_t seed) {
  if (!(train_ratio > 0.0 && train_ratio < 1.0)) {
    throw ConfigError("split_dataset: train_ratio must be in (0,1), got " +
                      std::to_string(train_ratio));
  }
  std::vector<std::vector<int64_t>> by_group(dataset.subgroup_count);
  for (int64_t i = 0; i < dataset.size(); ++i) {
    by_group[dataset.samples[i].attribute].push_back(i);
  }

  std::vector<int64_t> train_idx, test_idx;
  for (int64_t k = 0; k < dataset.subgroup_count; ++k) {
    auto& idx = by_group[k];
    const auto n = static_cast<int64_t>(idx.size());
    if (n == 0) continue;
    if (n < 2) {
      log_warn("split: subgroup " + std::to_string(k) + " has " + std::to_string(n) +
               " sample(s); assigning all to train");
      train_idx.insert(train_idx.end(), idx.begin(), idx.end());
      continue;
    }
    auto rng = make_rng(derive_seed(seed, static_cast<uint64_t>(k)));
    std::shuffle(idx.begin(), idx.end(), rng);
    const double exact = train_ratio * static_cast<double>(n);
    int64_t n_train = static_cast<int64_t>(std::floor(exact));
    if (exact - std::floor(exact) > 1e-9) {
      n_train += 1;  // fractional subgroups round toward train
    }
    n_train = std::min(n_train, n);
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + n_train);
    test_idx.insert(test_idx.end(), idx.begin() + n_train, idx.end());
  }

  auto build = [&](std::vector<int64_t>& indices) {
    std::sort(indices.begin(), indices.end(), [&](int64_t a, int64_t b) {
      return dataset.samples[a].id < dataset.samples[b].id;
    });
    SegDataset part;
    part.subgroup_count = dataset.subgroup_count;
    part.class_count = dataset.class_count;
    part.attribute_name = dataset.attribute_name;
    part.subgroup_labels = dataset.subgroup_labels;
    for (int64_t i : indices) {
      part.samples.push_back(dataset.samples[i]);
    }
    return part;
  };
  return {build(train_idx), build(test_idx)};
}

SegDataset subset_by_ids(const SegDataset& source, const std::unordered_set<std::string>& ids) {
  SegDataset out;
  out.subgroup_count = source.subgroup_count;
  out.class_count = source.class_count;
  out.attribute_name = source.attribute_name;
  out.subgroup_labels = source.subgroup_labels;
  size_t found = 0;
  for (const auto& s : source.samples) {
    if (ids.count(s.id)) {
      out.samples.push_back(s);
      ++found;
    }
  }
  if (found != ids.size()) {
    throw DataError("subset_by_ids: " + std::to_string(ids.size() - found) +
                    " requested id(s) missing from the source dataset");
  }
  return out;
}

SegDataset subgroup_subset(const SegDataset& dataset, int64_t subgroup) {
  if (subgroup < 0 || subgroup >= dataset.subgroup_count) {
    throw DataError("subgroup_subset: subgroup id out of range");
  }
  SegDataset out;
  out.subgroup_count = dataset.subgroup_count;
  out.class_count = dataset.class_count;
  out.attribute_name = dataset.attribute_name;
  out.subgroup_labels = dataset.subgroup_labels;
  for (const auto& s : dataset.samples) {
    if (s.attribute == subgroup) {
      out.samples.push_back(s);
    }
  }
  return out;
}

}  // namespace fairseg::data
