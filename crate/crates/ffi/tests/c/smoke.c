#include <math.h>
#include <stdio.h>
#include <string.h>

#include "effiperc.h"

#define CHECK(cond)                                                            \
  do {                                                                         \
    if (!(cond)) {                                                             \
      fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #cond,           \
              ep_last_error_message());                                        \
      return 1;                                                                \
    }                                                                          \
  } while (0)

static int voxels(void) {
  float pts[] = {10.05f, 0.05f, 0.05f, 0.5f, 10.06f, 0.06f, 0.06f, 0.1f,
                 20.0f, 5.0f, -1.0f, 0.2f, 100.0f, 0.0f, 0.0f, 0.9f};
  EpVoxelConfig cfg = ep_voxel_config_kitti();
  EpVoxelBatch *vb = NULL;
  CHECK(ep_voxelize(pts, 4, &cfg, &vb) == EP_STATUS_OK);
  CHECK(ep_voxel_batch_len(vb) == 2);
  EpVoxelStats s;
  CHECK(ep_voxel_batch_stats(vb, &s) == EP_STATUS_OK);
  CHECK(s.total == 4 && s.retained == 3 && s.out_of_range == 1);
  uint32_t coords[8];
  CHECK(ep_voxel_batch_coords(vb, coords, 4) == EP_STATUS_BUFFER_TOO_SMALL);
  CHECK(ep_voxel_batch_coords(vb, coords, 8) == EP_STATUS_OK);
  ep_voxel_batch_free(vb);
  return 0;
}

static int conv(void) {
  uint32_t coords[] = {0, 1, 1, 1, 0, 1, 1, 2};
  float feats[] = {1.0f, 2.0f};
  EpSparseTensor *x = NULL, *y = NULL;
  CHECK(ep_sparse_tensor_new(4, 4, 4, 1, 1, coords, 2, feats, &x) == EP_STATUS_OK);
  EpSparseConv *layer = NULL;
  CHECK(ep_sparse_conv_new(1, 1, 3, 1, 1, 1, 0, &layer) == EP_STATUS_OK);
  float w[27], b[1] = {0.5f};
  for (int i = 0; i < 27; i++) w[i] = 1.0f;
  CHECK(ep_sparse_conv_set_weights(layer, w, 27, b, 1) == EP_STATUS_OK);
  CHECK(ep_sparse_conv_forward(layer, x, &y) == EP_STATUS_OK);
  CHECK(ep_sparse_tensor_len(y) == 2);
  float out[2];
  CHECK(ep_sparse_tensor_features(y, out, 2) == EP_STATUS_OK);
  /* each site sees both inputs through an all-ones kernel */
  CHECK(fabsf(out[0] - 3.5f) < 1e-6f && fabsf(out[1] - 3.5f) < 1e-6f);
  ep_sparse_tensor_free(y);
  ep_sparse_tensor_free(x);
  ep_sparse_conv_free(layer);
  return 0;
}

static int optimizer(void) {
  size_t sizes[] = {300};
  EpOptimConfig cfg = ep_optim_config_default();
  cfg.lr = 1e-2;
  EpOptimizer *opt = NULL;
  CHECK(ep_optimizer_new(EP_OPTIMIZER_KIND_EIGHT_BIT, &cfg, sizes, 1, &opt) == EP_STATUS_OK);
  float p[300], g[300];
  for (int i = 0; i < 300; i++) p[i] = (float)i / 300.0f;
  for (int step = 0; step < 50; step++) {
    for (int i = 0; i < 300; i++) g[i] = 2.0f * p[i];
    float *ps[] = {p};
    const float *gs[] = {g};
    CHECK(ep_optimizer_step(opt, ps, gs, 1) == EP_STATUS_OK);
  }
  CHECK(ep_optimizer_step_count(opt) == 50);
  CHECK(p[299] < 0.6f);
  CHECK(ep_optimizer_state_bytes(opt) < 4 * 300 * 2 * 30 / 100);
  size_t need = 0;
  CHECK(ep_optimizer_checkpoint(opt, NULL, 0, &need) == EP_STATUS_BUFFER_TOO_SMALL);
  unsigned char buf[2048];
  CHECK(need <= sizeof buf);
  CHECK(ep_optimizer_checkpoint(opt, buf, sizeof buf, &need) == EP_STATUS_OK);
  CHECK(memcmp(buf, "EPQ8", 4) == 0);
  CHECK(ep_optimizer_restore(opt, buf, need) == EP_STATUS_OK);
  CHECK(ep_optimizer_restore(opt, buf, 3) == EP_STATUS_FORMAT);
  ep_optimizer_free(opt);
  return 0;
}

static int errors(void) {
  EpSparseTensor *t = NULL;
  uint32_t dup[] = {0, 0, 0, 0, 0, 0, 0, 0};
  float f[] = {1.0f, 1.0f};
  CHECK(ep_sparse_tensor_new(2, 2, 2, 1, 1, dup, 2, f, &t) == EP_STATUS_ALIGNMENT);
  CHECK(t == NULL);
  CHECK(strlen(ep_last_error_message()) > 0);
  CHECK(ep_voxelize(NULL, 1, NULL, NULL) == EP_STATUS_NULL_POINTER);
  ep_sparse_tensor_free(NULL);
  return 0;
}

int main(void) {
  if (voxels() || conv() || optimizer() || errors()) return 1;
  printf("c abi ok (%s)\n", ep_version());
  return 0;
}
