/** Rate limiter keeping the server's control queue bounded: at most one
 * control message goes out per received frame. While the gate is closed the
 * latest message of each kind is parked, and the arrival of the next frame
 * releases exactly one (oldest kind first, latest payload wins).
 */

export class ControlGate {
  private open = true;
  private parked = new Map<string, string>();

  constructor(private readonly send: (text: string) => void) {}

  /** Submit a control message of the given kind (e.g. "camera"). */
  submit(kind: string, text: string): void {
    if (this.open) {
      this.open = false;
      this.send(text);
    } else {
      this.parked.delete(kind); // re-insert so the kind keeps queue position
      this.parked.set(kind, text);
    }
  }

  /** A frame arrived: reopen the gate or flush one parked message. */
  onFrame(): void {
    const next = this.parked.entries().next();
    if (!next.done) {
      const [kind, text] = next.value;
      this.parked.delete(kind);
      this.send(text);
      this.open = false;
    } else {
      this.open = true;
    }
  }

  get pending(): number {
    return this.parked.size;
  }
}
