/* Prints the Teechain cost row for a 2-of-3 and a 1-of-1 deposit. */
#include <stdio.h>

#include "teechain.h"

int main(void) {
    TcCostParams p = tc_cost_params_default();
    p.n1 = 3;
    p.m1 = 2;
    TcCostRow row;
    TcStatus s = tc_cost_formula("teechain", &p, &row);
    if (s != TC_STATUS_OK) {
        fprintf(stderr, "error %d: %s\n", s, tc_last_error());
        return 1;
    }
    printf("unilateral: %lld/%lld txs, cost %lld/%lld\n",
           (long long)row.unilateral_txs.num, (long long)row.unilateral_txs.den,
           (long long)row.unilateral_cost.num, (long long)row.unilateral_cost.den);
    return 0;
}
