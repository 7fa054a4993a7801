#ifndef SFFORMER_SFFORMER_H
#define SFFORMER_SFFORMER_H

#include <stddef.h>
#include <stdint.h>

#if defined(SFF_BUILDING_LIBRARY)
#define SFF_API __attribute__((visibility("default")))
#else
#define SFF_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum sff_status {
  SFF_OK = 0,
  SFF_ERR_USAGE = 2,
  SFF_ERR_DATA = 3,
  SFF_ERR_NUMERIC = 4,
  SFF_ERR_IO = 5,
  SFF_ERR_INTERNAL = 6
} sff_status;

#define SFF_FEATURE_COUNT 15

/* Message for the most recent failure on the calling thread ("" if none). */
SFF_API const char* sff_last_error(void);
SFF_API const char* sff_version(void);
SFF_API void sff_free_string(char* s);
SFF_API void sff_free_buffer(uint8_t* bytes);

/* Feature names in matrix order: 12 shape descriptors, fa, md, nos. */
SFF_API const char* sff_feature_name(int kind);
/* Index of a feature name, or -1. */
SFF_API int sff_feature_index(const char* name);

typedef struct sff_cluster sff_cluster;

SFF_API sff_status sff_cluster_parse(const uint8_t* bytes, size_t length, sff_cluster** out);
SFF_API sff_status sff_cluster_load(const char* path, sff_cluster** out);
SFF_API sff_status sff_cluster_write(const sff_cluster* cluster, uint8_t** bytes, size_t* length);
SFF_API size_t sff_cluster_streamline_count(const sff_cluster* cluster);
SFF_API sff_status sff_cluster_point_count(const sff_cluster* cluster, size_t streamline, size_t* out);
/* Writes SFF_FEATURE_COUNT values; valid[k] is 0 where the descriptor is undefined (fa/md always 0). */
SFF_API sff_status sff_cluster_features(const sff_cluster* cluster, double spacing, double* values, int* valid);
SFF_API void sff_cluster_free(sff_cluster* cluster);

typedef struct sff_feature_options {
  double spacing;
  int surface_faces;     /* count exposed faces instead of surface voxels */
  int cylinder_diameter; /* 2*sqrt(V/(pi L)) */
  int points_only;       /* rasterize streamline points only, not segments */
} sff_feature_options;

SFF_API void sff_feature_options_init(sff_feature_options* options);
SFF_API sff_status sff_cluster_features_ex(const sff_cluster* cluster, const sff_feature_options* options,
                                           double* values, int* valid);

typedef struct sff_synth_options {
  size_t subjects;
  size_t clusters;
  size_t streamlines;
  size_t points;
  const char* family;  /* "rods", "arcs", "helices", "mixed" */
  const char* target;  /* "volume" or weighted terms such as "volume:1,diameter:0.5" */
  double sigma;
  uint64_t seed;
  double spacing;
  int scalar_maps;
  int permute_targets;
  const char* assessment;
} sff_synth_options;

SFF_API void sff_synth_options_init(sff_synth_options* options);
SFF_API sff_status sff_synth(const sff_synth_options* options, const char* root);

/* Loads every subject under root, writes feature CSVs to out_dir. Subjects that
 * fail are skipped and described in *log (one line each); *failed counts them.
 * cluster_count 0 infers the atlas size from the cluster file names. */
SFF_API sff_status sff_extract_features(const char* root, const char* out_dir, double spacing, size_t cluster_count,
                                        size_t threads, size_t* failed, char** log);
SFF_API sff_status sff_extract_features_ex(const char* root, const char* out_dir, const sff_feature_options* options,
                                           size_t cluster_count, size_t threads, size_t* failed, char** log);

typedef struct sff_run_options {
  const char* features_dir;
  const char* assessment;
  const char* primary;
  const char* helper; /* NULL or "" for the self-attention baseline */
  double learning_rate;
  double weight_decay;
  size_t token_dim;
  size_t n_layers;
  double dropout_attn;
  double dropout_ffn;
  double dropout_residual;
  size_t max_epochs;
  size_t patience;
  size_t batch_size;
  double validation_fraction;
  uint64_t seed;
  size_t threads;
  size_t trials;
  /* Search ranges; token range defaults to 64..512. */
  size_t token_min;
  size_t token_max;
  int helper_evolves;
  int mean_pool;
} sff_run_options;

SFF_API void sff_run_options_init(sff_run_options* options);
/* Each writes a JSON report into *report (free with sff_free_string). */
SFF_API sff_status sff_cv(const sff_run_options* options, char** report);
SFF_API sff_status sff_search(const sff_run_options* options, char** report);
SFF_API sff_status sff_select_helper(const sff_run_options* options, char** report);
/* Fits on all subjects (inner validation split for early stopping) and writes
 * the checkpoint plus "<checkpoint>.config". */
SFF_API sff_status sff_train(const sff_run_options* options, const char* checkpoint, char** report);

/* corrupt_op may be NULL. *passed is 1 when every case is under threshold. */
SFF_API sff_status sff_gradcheck(const char* corrupt_op, char** table, int* passed);

#ifdef __cplusplus
}
#endif

#endif
