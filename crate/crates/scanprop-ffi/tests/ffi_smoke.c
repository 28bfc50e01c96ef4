/* Syntax-checks the generated header and exercises every declaration.
 * Compiled with -fsyntax-only by the header test; never linked. */
#include "scanprop.h"

#include <stdio.h>

int main(void) {
    const char *version = scanprop_version();

    uint64_t indptr[3] = {0, 1, 2};
    uint32_t indices[2] = {0, 1};
    double data[2] = {1.0, 2.0};
    ScanpropCsr *csr = NULL;
    ScanpropStatus status =
        scanprop_csr_new(2, 2, indptr, 3, indices, data, 2, &csr);
    if (status != SCANPROP_STATUS_OK) {
        char message[256];
        scanprop_last_error(message, sizeof message);
        fprintf(stderr, "csr_new: %s\n", message);
        return 1;
    }

    double x[2] = {1.0, 1.0};
    double y[2];
    status = scanprop_csr_spmv(csr, x, 2, y, 2);

    ScanpropCsr *relu = NULL;
    status = scanprop_relu_tjac(x, 2, &relu);

    double weights[9] = {0};
    ScanpropCsr *conv = NULL;
    status = scanprop_conv3x3_tjac(1, 1, 3, 3, weights, 9, &conv);

    double image[16] = {0};
    double pooled[4];
    ScanpropCsr *pool = NULL;
    status = scanprop_maxpool_tjac(image, 1, 4, 4, 2, 2, pooled, 4, &pool);

    const ScanpropCsr *chain[2] = {csr, relu};
    ScanpropScanResult *result = NULL;
    status = scanprop_chain_backward(chain, 2, x, 2, SCANPROP_EXECUTOR_LINEAR,
                                     0, 0, 1, &result);
    if (status == SCANPROP_STATUS_OK) {
        uint64_t count = scanprop_scan_result_count(result);
        uint64_t dim = scanprop_scan_result_dim(result, 1);
        uint64_t ops = scanprop_scan_result_diamond_ops(result);
        uint64_t levels = scanprop_scan_result_levels(result);
        double grad[2];
        status = scanprop_scan_result_copy(result, 1, grad, 2);
        (void)count;
        (void)dim;
        (void)ops;
        (void)levels;
    }

    status = scanprop_gen_bits(4, 2, 7, "/tmp/ffi_smoke.bpds");

    scanprop_scan_result_free(result);
    scanprop_csr_free(pool);
    scanprop_csr_free(conv);
    scanprop_csr_free(relu);
    scanprop_csr_free(csr);
    (void)version;
    (void)status;
    return 0;
}
